"""Command-line pipeline driver.

Subcommands: synth, train, select, eval, ablate. Settings resolve in three
layers: built-in defaults, then a JSON config file of flat dotted keys
(`--config`, or the KEYFRAG_CONFIG environment variable), then command-line
flags. Every output file carries the resolved config hash and seed; reruns
with the same seed and config are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import agent, clustering, data_io, report, selector, trainer
from .data_io import ConfigError, LoadError, SynthConfig, load_trialset
from .numerics import ConvergenceError, Rng

ENV_CONFIG = "KEYFRAG_CONFIG"

SYNTH_PRESETS = {
    "default": {},
    "tiny": {"synth.trials": 8, "synth.t": 60, "synth.d": 8, "synth.fragments": 2,
             "synth.len_min": 6, "synth.len_max": 10},
}


@dataclass(frozen=True)
class Opt:
    flag: str
    key: str
    default: object
    type: type = str
    choices: tuple | None = None
    help: str = ""
    boolean: bool = False


SEED_OPT = Opt("--seed", "seed", 0, int, help="run seed")
FIGURES_OPT = Opt("--figures", "report.figures", True, boolean=True,
                  help="render figures next to the delimited outputs")

SYNTH_OPTS = [
    Opt("--preset", "synth.preset", "default", str, tuple(SYNTH_PRESETS)),
    Opt("--trials", "synth.trials", 30, int),
    Opt("--t", "synth.t", 240, int, help="samples per trial"),
    Opt("--d", "synth.d", 16, int, help="feature dimension"),
    Opt("--classes", "synth.classes", 2, int),
    Opt("--fragments", "synth.fragments", 2, int, help="planted fragments per trial"),
    Opt("--len-min", "synth.len_min", 8, int),
    Opt("--len-max", "synth.len_max", 12, int),
    Opt("--snr", "synth.snr", 2.0, float, help="signal-to-noise of planted fragments"),
    Opt("--subjects", "synth.subjects", 0, int, help="tag trials with this many subject groups (0 = none)"),
    SEED_OPT,
]

TRAIN_OPTS = [
    Opt("--epochs", "train.epochs", 100, int),
    Opt("--segment-len", "train.segment_len", 16, int),
    Opt("--episodes", "train.episodes", 5, int),
    Opt("--percentage", "train.percentage", 0.5, float, help="target selection fraction"),
    Opt("--balance", "train.balance", 0.01, float, help="regularizer weight"),
    Opt("--learning-rate", "train.learning_rate", 1e-4, float),
    Opt("--weight-decay", "train.weight_decay", 1e-5, float),
    Opt("--baseline-momentum", "train.baseline_momentum", 0.9, float),
    Opt("--agent", "train.agent", "full", str, ("full", "m1", "m2", "m3")),
    Opt("--reward", "train.reward", "rep+sim", str,
        ("rep", "sim", "div", "rep+div", "rep+sim", "r1", "r2", "r3", "r4", "r5")),
    Opt("--gcn-dim", "train.gcn_dim", 32, int),
    Opt("--gru-hidden", "train.gru_hidden", 256, int),
]

SELECT_OPTS = [
    Opt("--k", "select.k", 10, int, help="fragments per trial"),
    Opt("--l-max", "select.l_max", 8, int),
    Opt("--r-max", "select.r_max", 8, int),
    Opt("--nms", "select.nms", True, boolean=True, help="suppress near-duplicate centers"),
]

EVAL_OPTS = [
    Opt("--method", "eval.method", "hypergraph", str, clustering.METHODS),
    Opt("--sampling", "eval.sampling", "on", str, ("on", "off")),
    Opt("--knn", "eval.knn", 5, int, help="neighbors per hyperedge / graph vertex"),
    Opt("--granularity", "eval.granularity", "trial", str, ("trial", "sample")),
    Opt("--tiou-threshold", "eval.tiou_threshold", 0.5, float),
    Opt("--loocv", "eval.loocv", "none", str, ("none", "subject")),
]

ABLATE_OPTS = [
    Opt("--agents", "ablate.agents", "full,m1,m2,m3", str),
    Opt("--rewards", "ablate.rewards", "r1,r2,r3,r4,r5", str),
    Opt("--offsets", "ablate.offsets", "5,6,7,8,9,10", str),
]

ALL_KNOWN_KEYS = {opt.key for opts in
                  (SYNTH_OPTS, TRAIN_OPTS, SELECT_OPTS, EVAL_OPTS, ABLATE_OPTS,
                   [SEED_OPT, FIGURES_OPT])
                  for opt in opts}


def _add_options(parser: argparse.ArgumentParser, opts: list[Opt]) -> None:
    for opt in opts:
        dest = opt.key.replace(".", "__")
        if opt.boolean:
            parser.add_argument(opt.flag, dest=dest, default=None,
                                action=argparse.BooleanOptionalAction, help=opt.help)
        else:
            parser.add_argument(opt.flag, dest=dest, default=None, type=opt.type,
                                choices=opt.choices, help=opt.help)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        path = os.environ.get(ENV_CONFIG)
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config file {p}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {p} must contain a JSON object")
    unknown = sorted(set(cfg) - ALL_KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def _resolve(opts: list[Opt], args: argparse.Namespace, file_cfg: dict) -> dict:
    """defaults < config file < flags; returns dotted-key -> value."""
    resolved = {}
    for opt in opts:
        value = getattr(args, opt.key.replace(".", "__"), None)
        if value is None:
            value = file_cfg.get(opt.key, opt.default)
            if not opt.boolean and value is not None:
                value = opt.type(value)
            if opt.choices and value not in opt.choices:
                raise ConfigError(f"{opt.key}={value!r} not one of {list(opt.choices)}")
        resolved[opt.key] = value
    return resolved


def _config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _meta(resolved: dict) -> dict:
    return {"config_hash": _config_hash(resolved), "seed": resolved.get("seed", 0)}


def _train_config(cfg: dict, seed: int) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        segment_len=cfg["train.segment_len"], episodes=cfg["train.episodes"],
        percentage=cfg["train.percentage"], balance=cfg["train.balance"],
        learning_rate=cfg["train.learning_rate"], weight_decay=cfg["train.weight_decay"],
        max_epochs=cfg["train.epochs"], baseline_momentum=cfg["train.baseline_momentum"],
        seed=seed, agent_variant=cfg["train.agent"], gcn_dim=cfg["train.gcn_dim"],
        gru_hidden=cfg["train.gru_hidden"], reward_combo=cfg["train.reward"])


def _select_config(cfg: dict) -> selector.SelectConfig:
    return selector.SelectConfig(k=cfg["select.k"], l_max=cfg["select.l_max"],
                                 r_max=cfg["select.r_max"], nms=cfg["select.nms"])


def cmd_synth(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _resolve(SYNTH_OPTS, args, file_cfg)
    preset = SYNTH_PRESETS[cfg["synth.preset"]]
    for key, value in preset.items():
        dest = key.replace(".", "__")
        if getattr(args, dest, None) is None and key not in file_cfg:
            cfg[key] = value
    synth_cfg = SynthConfig(
        trial_count=cfg["synth.trials"], T=cfg["synth.t"], D=cfg["synth.d"],
        class_count=cfg["synth.classes"], fragments_per_trial=cfg["synth.fragments"],
        fragment_len_range=(cfg["synth.len_min"], cfg["synth.len_max"]),
        signal_to_noise=cfg["synth.snr"], seed=cfg["seed"],
        subjects=cfg["synth.subjects"] or None)
    trialset = data_io.synth_generate(synth_cfg)
    manifest = data_io.save_trialset(args.out, trialset, meta=_meta(cfg))
    print(f"wrote {len(trialset)} trials to {manifest}")
    return 0


def _load_data(path: str):
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    return load_trialset(p)


def cmd_train(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _resolve(TRAIN_OPTS + [SEED_OPT, FIGURES_OPT], args, file_cfg)
    trials = _load_data(args.data)
    train_cfg = _train_config(cfg, cfg["seed"])
    params, log = trainer.train(trials, train_cfg)
    out_dir = Path(args.out_dir)
    meta = _meta(cfg)
    agent.save_checkpoint(out_dir / "agent.ckpt", params,
                          extra={"segment_len": train_cfg.segment_len, **meta})
    trainer.save_train_log(out_dir / "train_log.csv", log, meta=meta)
    if cfg["report.figures"]:
        report.render_training_curves(log, out_dir / "training_curves.png")
    print(f"trained {train_cfg.agent_variant} agent for {train_cfg.max_epochs} epochs; "
          f"final mean reward {log[-1].mean_reward:.4f}")
    return 0


def cmd_select(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _resolve(SELECT_OPTS + [SEED_OPT, FIGURES_OPT], args, file_cfg)
    trials = _load_data(args.data)
    params = agent.load_checkpoint(args.checkpoint)
    header = agent.read_checkpoint_header(args.checkpoint)
    segment_len = int(header.get("segment_len", 16))
    select_cfg = _select_config(cfg)
    scores_by_trial = {}
    fragments = []
    fragments_by_trial = {}
    for trial in trials:
        scores, _ = agent.forward(trial.features, params, segment_len)
        scores_by_trial[trial.id] = scores
        frags = selector.select(scores, select_cfg, trial_id=trial.id)
        fragments.extend(frags)
        fragments_by_trial[trial.id] = frags
    out_dir = Path(args.out_dir)
    meta = _meta(cfg)
    data_io.save_scores(out_dir / "scores.csv", scores_by_trial, meta=meta)
    data_io.save_fragments(out_dir / "fragments.json", fragments, meta=meta)
    if cfg["report.figures"]:
        report.render_score_timelines(trials, scores_by_trial, fragments_by_trial,
                                      out_dir / "score_timelines.png")
    print(f"selected {len(fragments)} fragments across {len(trials)} trials")
    return 0


def _pool_vectors(trials, fragments_by_trial, sampling: bool) -> np.ndarray:
    vectors = []
    for trial in trials:
        frags = fragments_by_trial.get(trial.id, []) if sampling else []
        vectors.append(clustering.pool_trial(trial, frags))
    return np.vstack(vectors)


def _cluster_metrics(trials, fragments_by_trial, cfg: dict, seed: int) -> dict:
    labels = [t.label for t in trials]
    if any(lab is None for lab in labels):
        raise ConfigError("eval requires labels on every trial")
    class_count = max(labels) + 1
    sampling = cfg["eval.sampling"] == "on"
    if cfg["eval.granularity"] == "sample":
        rows, row_trial = [], []
        for i, trial in enumerate(trials):
            frags = fragments_by_trial.get(trial.id, []) if sampling else []
            idx = (selector.fragment_indices(frags, trial.T) if frags
                   else np.arange(trial.T))
            rows.append(trial.features[idx])
            row_trial.extend([i] * len(idx))
        result = clustering.spectral_cluster(np.vstack(rows), class_count,
                                             method=cfg["eval.method"], seed=seed,
                                             k_nn=cfg["eval.knn"])
        row_trial = np.asarray(row_trial)
        assignments = np.array([
            np.argmax(np.bincount(result.assignments[row_trial == i], minlength=class_count))
            for i in range(len(trials))])
    else:
        vectors = _pool_vectors(trials, fragments_by_trial, sampling)
        result = clustering.spectral_cluster(vectors, class_count, method=cfg["eval.method"],
                                             seed=seed, k_nn=cfg["eval.knn"])
        assignments = result.assignments
    p_acc, p_f, nmi = clustering.align_and_score(assignments, np.asarray(labels))
    recall = None
    tau = cfg["eval.tiou_threshold"]
    with_truth = [t for t in trials if t.truth_intervals]
    if sampling and with_truth:
        recalls = [clustering.recall_at(fragments_by_trial.get(t.id, []), t.truth_intervals, tau)
                   for t in with_truth]
        recall = float(np.mean(recalls))
    return {"method": cfg["eval.method"], "sampling": sampling, "p_acc": p_acc,
            "p_f": p_f, "nmi": nmi, "recall_tiou_0.5": recall}


def _group_fragments(fragments) -> dict[str, list[selector.Fragment]]:
    grouped: dict[str, list[selector.Fragment]] = {}
    for frag in fragments:
        grouped.setdefault(frag.trial_id, []).append(frag)
    return grouped


def cmd_eval(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _resolve(EVAL_OPTS + TRAIN_OPTS + SELECT_OPTS + [SEED_OPT], args, file_cfg)
    trials = _load_data(args.data)
    seed = cfg["seed"]
    if cfg["eval.loocv"] == "subject":
        metrics = _loocv_metrics(trials, cfg, seed)
    else:
        fragments_by_trial: dict[str, list[selector.Fragment]] = {}
        if cfg["eval.sampling"] == "on":
            if not args.fragments:
                raise ConfigError("--sampling on requires --fragments")
            fragments_by_trial = _group_fragments(data_io.load_fragments(args.fragments))
        metrics = _cluster_metrics(trials.trials, fragments_by_trial, cfg, seed)
    data_io.save_metrics(args.out, metrics, meta=_meta(cfg))
    summary = {k: v for k, v in metrics.items() if isinstance(v, (int, float)) and v is not None}
    print(f"eval {metrics['method']} sampling={metrics['sampling']}: "
          + ", ".join(f"{k}={v:.4f}" for k, v in summary.items() if k not in ("sampling",)))
    return 0


def _loocv_metrics(trials, cfg: dict, seed: int) -> dict:
    subjects = trials.subjects()
    if len(subjects) < 2:
        raise ConfigError("subject LOOCV needs trials tagged with at least 2 subjects")
    sampling = cfg["eval.sampling"] == "on"
    select_cfg = _select_config(cfg)
    folds = []
    for subject in subjects:
        train_trials = [t for t in trials if t.subject != subject]
        test_trials = [t for t in trials if t.subject == subject]
        train_set = data_io.TrialSet(trials=train_trials, feature_dim=trials.feature_dim,
                                     class_count=trials.class_count)
        params, _ = trainer.train(train_set, _train_config(cfg, seed))
        fragments_by_trial = {}
        if sampling:
            for t in test_trials:
                scores, _ = agent.forward(t.features, params, cfg["train.segment_len"])
                fragments_by_trial[t.id] = selector.select(scores, select_cfg, trial_id=t.id)
        fold_metrics = _cluster_metrics(test_trials, fragments_by_trial, cfg, seed)
        fold_metrics["subject"] = subject
        folds.append(fold_metrics)
    mean = {key: float(np.mean([f[key] for f in folds if f[key] is not None]))
            if any(f[key] is not None for f in folds) else None
            for key in ("p_acc", "p_f", "nmi", "recall_tiou_0.5")}
    return {"method": cfg["eval.method"], "sampling": sampling, **mean, "folds": folds}


def cmd_ablate(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _resolve(ABLATE_OPTS + TRAIN_OPTS + SELECT_OPTS + EVAL_OPTS
                   + [SEED_OPT, FIGURES_OPT], args, file_cfg)
    trials = _load_data(args.data)
    agents = [a.strip() for a in cfg["ablate.agents"].split(",") if a.strip()]
    reward_combos = [r.strip() for r in cfg["ablate.rewards"].split(",") if r.strip()]
    offsets = [int(o) for o in cfg["ablate.offsets"].split(",") if o.strip()]
    seed = cfg["seed"]
    rows = []
    for agent_variant in agents:
        for combo in reward_combos:
            for offset in offsets:
                row = {"agent": agent_variant, "reward": combo, "offset": offset,
                       "p_acc": None, "p_f": None, "nmi": None,
                       "recall_tiou_0.5": None, "status": "ok", "error": ""}
                try:
                    cell_cfg = dict(cfg)
                    cell_cfg["train.agent"] = agent_variant
                    cell_cfg["train.reward"] = combo
                    cell_cfg["select.l_max"] = offset
                    cell_cfg["select.r_max"] = offset
                    params, _ = trainer.train(trials, _train_config(cell_cfg, seed))
                    select_cfg = _select_config(cell_cfg)
                    fragments_by_trial = {}
                    for trial in trials:
                        scores, _ = agent.forward(trial.features, params,
                                                  cell_cfg["train.segment_len"])
                        fragments_by_trial[trial.id] = selector.select(
                            scores, select_cfg, trial_id=trial.id)
                    metrics = _cluster_metrics(trials.trials, fragments_by_trial,
                                               cell_cfg, seed)
                    row.update({k: metrics[k] for k in
                                ("p_acc", "p_f", "nmi", "recall_tiou_0.5")})
                except Exception as exc:  # keep the grid running
                    row["status"] = "error"
                    row["error"] = str(exc).replace("\n", " ")
                rows.append(row)
                print(f"[{row['status']}] agent={agent_variant} reward={combo} "
                      f"offset={offset}", file=sys.stderr)
    out_dir = Path(args.out_dir)
    lines = ["# " + json.dumps(_meta(cfg), sort_keys=True),
             "agent,reward,offset,p_acc,p_f,nmi,recall_tiou_0.5,status,error"]
    for row in rows:
        cells = [row["agent"], row["reward"], str(row["offset"])]
        for key in ("p_acc", "p_f", "nmi", "recall_tiou_0.5"):
            cells.append("" if row[key] is None else f"{row[key]:.17g}")
        cells.append(row["status"])
        cells.append('"' + row["error"].replace('"', "'") + '"' if row["error"] else "")
        lines.append(",".join(cells))
    data_io.atomic_write_text(out_dir / "ablate.csv", "\n".join(lines) + "\n")
    if cfg["report.figures"]:
        report.render_ablation_summary(rows, out_dir / "ablation_summary.png")
    failures = sum(r["status"] != "ok" for r in rows)
    print(f"ablation grid: {len(rows)} cells, {failures} failed; wrote {out_dir / 'ablate.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="keyfrag",
        description="Key-fragment sampling and unsupervised clustering pipeline")
    parser.add_argument("--config", default=None,
                        help=f"JSON config file of flat dotted keys (or ${ENV_CONFIG})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic planted-fragment dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    _add_options(p, SYNTH_OPTS)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the scoring agent")
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--out-dir", required=True)
    _add_options(p, TRAIN_OPTS + [SEED_OPT, FIGURES_OPT])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select", help="score trials and extract key fragments")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    _add_options(p, SELECT_OPTS + [SEED_OPT, FIGURES_OPT])
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", help="cluster trials and report metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--fragments", default=None, help="fragments JSON from `select`")
    p.add_argument("--out", required=True, help="metrics JSON path")
    _add_options(p, EVAL_OPTS + TRAIN_OPTS + SELECT_OPTS + [SEED_OPT])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the agent/reward/offset grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    _add_options(p, ABLATE_OPTS + TRAIN_OPTS + SELECT_OPTS + EVAL_OPTS
                 + [SEED_OPT, FIGURES_OPT])
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, LoadError, trainer.TrainingError, ConvergenceError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
