"""Figure rendering for the CLI report paths.

All figures are written as PNG next to the delimited outputs, with metadata
stripped so reruns are byte-identical.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data_io import TrialSet, atomic_write_bytes
from .selector import Fragment
from .trainer import EpochStats

DPI = 120


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def render_training_curves(log: list[EpochStats], path) -> None:
    """Mean reward components and regularizer loss per epoch."""
    epochs = [row.epoch for row in log]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2), constrained_layout=True)
    ax1.plot(epochs, [row.mean_reward for row in log], label="total", color="tab:blue")
    ax1.plot(epochs, [row.mean_r_rep for row in log], label="representativeness",
             color="tab:green", alpha=0.7)
    ax1.plot(epochs, [row.mean_r_sim for row in log], label="similarity",
             color="tab:orange", alpha=0.7)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean reward")
    ax1.legend(fontsize=8)
    ax2.plot(epochs, [row.mean_reg_loss for row in log], color="tab:red")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("selection-percentage loss")
    _save(fig, path)


def render_score_timelines(trials: TrialSet, scores_by_trial: dict[str, np.ndarray],
                           fragments_by_trial: dict[str, list[Fragment]], path,
                           max_trials: int = 6) -> None:
    """Per-trial importance scores with selected fragments (shaded) and truth
    intervals (hatched) for the first few trials."""
    shown = [t for t in trials if t.id in scores_by_trial][:max_trials]
    if not shown:
        return
    fig, axes = plt.subplots(len(shown), 1, figsize=(9, 1.6 * len(shown)),
                             sharex=False, constrained_layout=True, squeeze=False)
    for ax, trial in zip(axes[:, 0], shown):
        p = scores_by_trial[trial.id]
        ax.plot(np.arange(1, p.size + 1), p, color="tab:blue", lw=1.0)
        for frag in fragments_by_trial.get(trial.id, []):
            ax.axvspan(frag.left, frag.right, color="tab:purple", alpha=0.25, lw=0)
        for start, end in trial.truth_intervals or []:
            ax.axvspan(start + 1, end, facecolor="none", edgecolor="tab:green",
                       hatch="//", lw=0.8)
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel(trial.id, fontsize=8)
    axes[-1, 0].set_xlabel("sample")
    _save(fig, path)


def render_ablation_summary(rows: list[dict], path) -> None:
    """Accuracy per grid cell, grouped by agent variant; recall across the
    offset sweep on a second panel."""
    ok = [r for r in rows if r.get("status") == "ok"]
    if not ok:
        return
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.4), constrained_layout=True)
    labels = [f"{r['agent']}/{r['reward']}/{r['offset']}" for r in ok]
    ax1.bar(range(len(ok)), [r["p_acc"] for r in ok], color="tab:blue")
    ax1.set_xticks(range(len(ok)))
    ax1.set_xticklabels(labels, rotation=75, fontsize=6)
    ax1.set_ylabel("clustering accuracy")
    by_offset: dict[int, list[float]] = {}
    for r in ok:
        if r.get("recall_tiou_0.5") is not None:
            by_offset.setdefault(int(r["offset"]), []).append(r["recall_tiou_0.5"])
    if by_offset:
        offsets = sorted(by_offset)
        ax2.plot(offsets, [float(np.mean(by_offset[o])) for o in offsets],
                 marker="o", color="tab:purple")
        ax2.set_xlabel("max offset")
        ax2.set_ylabel("recall @ tIoU 0.5")
    _save(fig, path)
