"""Inference-time key-fragment extraction: rank importance scores, pick top-K
centers, and expand each center into an interval using score-scaled offsets.

Fragments use 1-based inclusive sample indices (left <= center <= right);
`fragment_interval` converts to the half-open 0-based convention used by the
truth intervals and the tIoU metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Array


@dataclass(frozen=True)
class Fragment:
    trial_id: str
    center: int
    left: int
    right: int
    score: float

    def __post_init__(self):
        if not 1 <= self.left <= self.center <= self.right:
            raise ValueError(f"bad fragment bounds left={self.left} center={self.center} "
                             f"right={self.right}")


@dataclass(frozen=True)
class SelectConfig:
    k: int = 10
    l_max: int = 8
    r_max: int = 8
    nms: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.l_max < 0 or self.r_max < 0:
            raise ValueError("offsets must be >= 0")


def expand_fragment(center: int, score: float, l_max: int, r_max: int, T: int,
                    trial_id: str = "") -> Fragment:
    """Grow a center into [ceil(c - p*l_max), floor(c + p*r_max)], clamped to
    the trial bounds."""
    if not 1 <= center <= T:
        raise ValueError(f"center {center} outside [1, {T}]")
    left = max(1, math.ceil(center - score * l_max))
    right = min(T, math.floor(center + score * r_max))
    return Fragment(trial_id=trial_id, center=center, left=left, right=right, score=float(score))


def select(scores: Array, cfg: SelectConfig, trial_id: str = "") -> list[Fragment]:
    """Deterministic top-K fragment selection.

    Centers are visited in descending score order (ties to the earlier
    timestep). With nms on, a candidate is rejected when it sits within
    max(l_max, r_max) of an already accepted center. Output is sorted by
    center.
    """
    p = np.asarray(scores, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValueError("scores must be a non-empty vector")
    T = p.size
    order = np.argsort(-p, kind="stable")  # stable sort keeps earlier index first on ties
    min_gap = max(cfg.l_max, cfg.r_max)
    accepted: list[int] = []
    for idx in order:
        center = int(idx) + 1
        if cfg.nms and any(abs(center - c) <= min_gap for c in accepted):
            continue
        accepted.append(center)
        if len(accepted) == cfg.k:
            break
    fragments = [expand_fragment(c, float(p[c - 1]), cfg.l_max, cfg.r_max, T, trial_id)
                 for c in accepted]
    fragments.sort(key=lambda f: f.center)
    return fragments


def fragment_interval(fragment: Fragment) -> tuple[int, int]:
    """Half-open 0-based [start, end) covered by an inclusive 1-based fragment."""
    return fragment.left - 1, fragment.right


def fragment_indices(fragments, T: int) -> Array:
    """Sorted union of the 0-based sample indices covered by the fragments."""
    mask = np.zeros(T, dtype=bool)
    for f in fragments:
        start, end = fragment_interval(f)
        mask[start:end] = True
    return np.flatnonzero(mask)
