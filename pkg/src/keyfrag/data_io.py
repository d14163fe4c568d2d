"""Trial ingestion and persistence, the synthetic planted-fragment generator,
and a windowed-statistics feature extractor for raw multichannel signals.

Dataset layout on disk: a `manifest.json` next to per-trial CSV feature files
(one row per 1 s sample, full decimal precision). Truth intervals are
half-open [start, end) sample-index pairs, 0-based.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import periodogram

from .numerics import Array, Rng

FLOAT_FMT = "%.17g"

# Band edges in cycles/sample (octaves of the Nyquist frequency).
BAND_EDGES = (0.0, 0.0625, 0.125, 0.25, 0.5)


class LoadError(ValueError):
    """Raised when a dataset file is missing, malformed, or inconsistent."""


class ConfigError(ValueError):
    """Raised for invalid generator or run configuration."""


def atomic_write_text(path, text: str) -> None:
    """Write-temp-then-rename so partially written outputs never appear."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _validate_intervals(intervals, T: int, trial_id: str) -> list[tuple[int, int]]:
    out = []
    for iv in intervals:
        if len(iv) != 2:
            raise LoadError(f"trial '{trial_id}': interval {iv!r} is not a [start, end) pair")
        start, end = int(iv[0]), int(iv[1])
        if not (0 <= start < end <= T):
            raise LoadError(f"trial '{trial_id}': interval [{start}, {end}) outside [0, {T})")
        out.append((start, end))
    out.sort()
    for (s1, e1), (s2, e2) in zip(out, out[1:]):
        if e1 > s2:
            raise LoadError(f"trial '{trial_id}': intervals [{s1},{e1}) and [{s2},{e2}) overlap")
    return out


@dataclass
class Trial:
    """One feature sequence (T x D) with optional label, truth intervals, and
    subject tag."""

    id: str
    features: Array
    label: int | None = None
    truth_intervals: list[tuple[int, int]] | None = None
    subject: str | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise LoadError(f"trial '{self.id}': features must be a non-empty T x D matrix")
        if not np.all(np.isfinite(self.features)):
            raise LoadError(f"trial '{self.id}': features contain non-finite values")
        if self.truth_intervals is not None:
            self.truth_intervals = _validate_intervals(
                self.truth_intervals, self.features.shape[0], self.id)

    @property
    def T(self) -> int:
        return self.features.shape[0]


@dataclass
class TrialSet:
    trials: list[Trial]
    feature_dim: int
    class_count: int | None = None

    def __post_init__(self):
        for trial in self.trials:
            if trial.features.shape[1] != self.feature_dim:
                raise LoadError(f"trial '{trial.id}' has feature dim "
                                f"{trial.features.shape[1]}, expected {self.feature_dim}")
            if trial.label is not None:
                if self.class_count is None or not 0 <= trial.label < self.class_count:
                    raise LoadError(f"trial '{trial.id}' label {trial.label} outside "
                                    f"[0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    def __getitem__(self, i: int) -> Trial:
        return self.trials[i]

    def subjects(self) -> list[str]:
        seen = []
        for trial in self.trials:
            if trial.subject is not None and trial.subject not in seen:
                seen.append(trial.subject)
        return seen


def _parse_csv_matrix(path: Path, trial_id: str) -> Array:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cells = line.split(",")
            row = []
            for colno, cell in enumerate(cells, start=1):
                try:
                    row.append(float(cell))
                except ValueError:
                    raise LoadError(f"trial '{trial_id}': non-numeric cell at "
                                    f"row {lineno}, col {colno} of {path}") from None
            rows.append(row)
    if not rows:
        raise LoadError(f"trial '{trial_id}': feature file {path} is empty")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise LoadError(f"trial '{trial_id}': ragged rows in {path} (widths {sorted(widths)})")
    return np.array(rows, dtype=np.float64)


def load_trialset(manifest_path) -> TrialSet:
    """Load a manifest and its referenced feature CSVs, validating shapes,
    labels, and intervals; any inconsistency raises LoadError naming the trial."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise LoadError(f"manifest not found: {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise LoadError(f"malformed manifest {manifest_path}: {exc}") from exc
    if "feature_dim" not in manifest or "trials" not in manifest:
        raise LoadError(f"manifest {manifest_path} missing 'feature_dim' or 'trials'")
    feature_dim = int(manifest["feature_dim"])
    class_count = manifest.get("class_count")
    base = manifest_path.parent
    trials = []
    for entry in manifest["trials"]:
        trial_id = str(entry.get("id", "<missing id>"))
        if "path" not in entry:
            raise LoadError(f"trial '{trial_id}': manifest entry has no 'path'")
        feat_path = base / entry["path"]
        if not feat_path.exists():
            raise LoadError(f"trial '{trial_id}': feature file not found: {feat_path}")
        features = _parse_csv_matrix(feat_path, trial_id)
        if features.shape[1] != feature_dim:
            raise LoadError(f"trial '{trial_id}': {feat_path} has {features.shape[1]} "
                            f"columns, manifest declares {feature_dim}")
        if "T" in entry and int(entry["T"]) != features.shape[0]:
            raise LoadError(f"trial '{trial_id}': {feat_path} has {features.shape[0]} "
                            f"rows, manifest declares {entry['T']}")
        label = entry.get("label")
        trials.append(Trial(
            id=trial_id,
            features=features,
            label=None if label is None else int(label),
            truth_intervals=entry.get("truth_intervals"),
            subject=entry.get("subject"),
        ))
    return TrialSet(trials=trials, feature_dim=feature_dim,
                    class_count=None if class_count is None else int(class_count))


def save_trialset(directory, trialset: TrialSet, meta: dict | None = None) -> Path:
    """Write manifest.json plus one CSV per trial; returns the manifest path."""
    directory = Path(directory)
    entries = []
    for trial in trialset.trials:
        rel = f"trials/{trial.id}.csv"
        lines = [",".join(FLOAT_FMT % v for v in row) for row in trial.features]
        atomic_write_text(directory / rel, "\n".join(lines) + "\n")
        entry = {"id": trial.id, "path": rel, "T": trial.T}
        if trial.label is not None:
            entry["label"] = trial.label
        if trial.truth_intervals is not None:
            entry["truth_intervals"] = [list(iv) for iv in trial.truth_intervals]
        if trial.subject is not None:
            entry["subject"] = trial.subject
        entries.append(entry)
    manifest = {"feature_dim": trialset.feature_dim, "trials": entries}
    if trialset.class_count is not None:
        manifest["class_count"] = trialset.class_count
    if meta:
        manifest["meta"] = meta
    manifest_path = directory / "manifest.json"
    atomic_write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


@dataclass(frozen=True)
class SynthConfig:
    """Planted-fragment benchmark generator settings.

    Defaults are the benchmark preset used by the acceptance suite: light
    coverage (two short fragments per 240-sample trial) keeps full-trial
    pooling from saturating, so sampling has measurable headroom.
    """

    trial_count: int = 30
    T: int = 240
    D: int = 16
    class_count: int = 2
    fragments_per_trial: int = 2
    fragment_len_range: tuple[int, int] = (8, 12)
    signal_to_noise: float = 2.0
    seed: int = 0
    subjects: int | None = None

    def validate(self) -> None:
        lo, hi = self.fragment_len_range
        if self.trial_count < 1 or self.T < 1 or self.D < 1:
            raise ConfigError("trial_count, T, and D must all be >= 1")
        if self.class_count < 1:
            raise ConfigError("class_count must be >= 1")
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad fragment_len_range {self.fragment_len_range}")
        if self.fragments_per_trial * hi > self.T:
            raise ConfigError(
                f"{self.fragments_per_trial} fragments of up to {hi} samples cannot be "
                f"packed without overlap into T={self.T}")
        if self.signal_to_noise < 0:
            raise ConfigError("signal_to_noise must be >= 0")
        if self.subjects is not None and not 1 <= self.subjects <= self.trial_count:
            raise ConfigError("subjects must be in [1, trial_count]")


def _class_directions(D: int, class_count: int, rng: Rng) -> Array:
    """Fixed orthonormal directions (one per class), seeded; mutually
    orthogonal whenever D >= class_count."""
    k = min(class_count, D)
    gauss = rng.normal(size=(D, D))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))[None, :]  # deterministic sign convention
    dirs = q[:, :k].T
    if class_count > D:
        reps = int(np.ceil(class_count / D))
        dirs = np.tile(dirs, (reps, 1))[:class_count]
    return dirs


def _pack_intervals(T: int, lengths: list[int], rng: Rng) -> list[tuple[int, int]]:
    """Place intervals of the given lengths without overlap, uniformly over
    the feasible gap compositions."""
    k = len(lengths)
    slack = T - sum(lengths)
    if slack < 0:
        raise ConfigError(f"cannot pack fragments of total length {sum(lengths)} into T={T}")
    if k == 0:
        return []
    bars = np.sort(rng.choice(slack + k, size=k, replace=False)) if slack + k > k else np.arange(k)
    gaps = np.diff(np.concatenate([[-1], bars])) - 1
    intervals = []
    cursor = 0
    for gap, length in zip(gaps, lengths):
        cursor += int(gap)
        intervals.append((cursor, cursor + length))
        cursor += length
    return intervals


def synth_generate(cfg: SynthConfig) -> TrialSet:
    """Unit-variance Gaussian background with a class direction added inside
    each planted interval, scaled by signal_to_noise. Deterministic per seed;
    labels are balanced across classes within one trial."""
    cfg.validate()
    rng = Rng(cfg.seed)
    directions = _class_directions(cfg.D, cfg.class_count, rng.derive(0))
    trials = []
    per_subject = None
    if cfg.subjects is not None:
        per_subject = int(np.ceil(cfg.trial_count / cfg.subjects))
    for i in range(cfg.trial_count):
        trial_rng = rng.derive(1, i)
        label = i % cfg.class_count
        features = trial_rng.normal(size=(cfg.T, cfg.D))
        lo, hi = cfg.fragment_len_range
        lengths = [int(v) for v in trial_rng.integers(lo, hi + 1, size=cfg.fragments_per_trial)]
        intervals = _pack_intervals(cfg.T, lengths, trial_rng)
        for start, end in intervals:
            features[start:end] += cfg.signal_to_noise * directions[label]
        subject = None
        if per_subject is not None:
            subject = f"s{i // per_subject:02d}"
        trials.append(Trial(id=f"trial{i:03d}", features=features, label=label,
                            truth_intervals=intervals, subject=subject))
    return TrialSet(trials=trials, feature_dim=cfg.D, class_count=cfg.class_count)


def extract_stat_features(raw: Array, window: int, hop: int) -> Array:
    """Windowed statistics for a raw channels x samples signal.

    Per window and channel: mean, variance, and log power in four fixed
    frequency bands (octaves of Nyquist) from a periodogram; features are
    concatenated channel-blockwise, giving 6 * channels columns.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise ValueError("raw signal must be channels x samples")
    channels, samples = raw.shape
    if window < 1 or hop < 1:
        raise ValueError("window and hop must be >= 1")
    if window > samples:
        raise ValueError(f"window {window} larger than signal length {samples}")
    starts = range(0, samples - window + 1, hop)
    rows = []
    for start in starts:
        block = raw[:, start:start + window]
        feats = []
        for ch in range(channels):
            x = block[ch]
            freqs, power = periodogram(x, fs=1.0, detrend=False)
            band_power = []
            for lo, hi in zip(BAND_EDGES[:-1], BAND_EDGES[1:]):
                mask = (freqs > lo) & (freqs <= hi)
                band_power.append(np.log(max(float(power[mask].sum()), 1e-20)))
            feats.extend([float(x.mean()), float(x.var())] + band_power)
        rows.append(feats)
    return np.array(rows, dtype=np.float64)


def save_scores(path, scores_by_trial: dict[str, Array], meta: dict | None = None) -> None:
    """CSV `trial_id,t,p` with 1-based timesteps; optional metadata is written
    as a leading comment line."""
    lines = []
    if meta:
        lines.append("# " + json.dumps(meta, sort_keys=True))
    lines.append("trial_id,t,p")
    for trial_id, scores in scores_by_trial.items():
        for t, p in enumerate(np.asarray(scores), start=1):
            lines.append(f"{trial_id},{t},{FLOAT_FMT % p}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_scores(path) -> dict[str, Array]:
    out: dict[str, list[float]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("trial_id,"):
                continue
            trial_id, t, p = line.split(",")
            out.setdefault(trial_id, []).append(float(p))
    return {k: np.array(v) for k, v in out.items()}


def save_fragments(path, fragments, meta: dict | None = None) -> None:
    """JSON object with the fragment list under 'fragments' plus run metadata."""
    payload = {
        "meta": meta or {},
        "fragments": [
            {"trial_id": f.trial_id, "center": f.center, "left": f.left,
             "right": f.right, "score": f.score}
            for f in fragments
        ],
    }
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_fragments(path):
    from .selector import Fragment
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    records = payload["fragments"] if isinstance(payload, dict) else payload
    return [Fragment(trial_id=r["trial_id"], center=int(r["center"]), left=int(r["left"]),
                     right=int(r["right"]), score=float(r["score"])) for r in records]


def save_metrics(path, metrics: dict, meta: dict | None = None) -> None:
    payload = {"meta": meta or {}, "metrics": metrics}
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_metrics(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return payload["metrics"] if isinstance(payload, dict) and "metrics" in payload else payload
