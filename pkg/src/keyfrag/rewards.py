"""Rewards over a selected key-moment set: representativeness, similarity,
and diversity, plus their configured combinations.

Selected timesteps are 1-based indices into the feature sequence. An empty
selection earns 0 for every component, and a singleton earns 0 for the
pairwise components; both rules keep the training signal finite without
special-casing the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Array

REWARD_COMBOS = {
    "rep": ("rep",),
    "sim": ("sim",),
    "div": ("div",),
    "rep+div": ("rep", "div"),
    "rep+sim": ("rep", "sim"),
}

# Ablation shorthand used by the CLI.
COMBO_ALIASES = {"r1": "rep", "r2": "sim", "r3": "div", "r4": "rep+div", "r5": "rep+sim"}


@dataclass(frozen=True)
class RewardBreakdown:
    r_rep: float
    r_sim: float
    r_div: float | None
    total: float


def _selected_array(features: Array, selected) -> Array:
    idx = np.asarray(sorted(set(int(i) for i in selected)), dtype=np.int64)
    T = features.shape[0]
    if idx.size and (idx[0] < 1 or idx[-1] > T):
        raise ValueError(f"selected indices must lie in [1, {T}]")
    return idx


def reward_rep(features: Array, selected) -> float:
    """exp(-mean over all timesteps of the distance to the nearest selected
    sample); 1 when every timestep is selected, 0 for an empty selection."""
    features = np.asarray(features, dtype=np.float64)
    idx = _selected_array(features, selected)
    if idx.size == 0:
        return 0.0
    chosen = features[idx - 1]
    # direct differences rather than the a^2+b^2-2ab expansion: the oracle
    # tolerance on this quantity is tighter than the cancellation error
    diffs = features[:, None, :] - chosen[None, :, :]
    dists = np.sqrt(np.sum(diffs * diffs, axis=2))
    return float(np.exp(-np.mean(dists.min(axis=1))))


def _pairwise_cosines(features: Array, idx: Array) -> Array:
    """Cosine matrix over the selected rows; zero-norm rows contribute 0."""
    chosen = features[idx - 1]
    norms = np.linalg.norm(chosen, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = chosen / safe[:, None]
    cos = unit @ unit.T
    zero = norms == 0.0
    cos[zero, :] = 0.0
    cos[:, zero] = 0.0
    return cos


def reward_sim(features: Array, selected) -> float:
    """Mean cosine similarity over ordered pairs of selected samples; 0 when
    fewer than two are selected."""
    features = np.asarray(features, dtype=np.float64)
    idx = _selected_array(features, selected)
    k = idx.size
    if k < 2:
        return 0.0
    cos = _pairwise_cosines(features, idx)
    return float((cos.sum() - np.trace(cos)) / (k * (k - 1)))


def reward_div(features: Array, selected) -> float:
    """Mean pairwise dissimilarity (1 - cosine) over ordered selected pairs."""
    features = np.asarray(features, dtype=np.float64)
    idx = _selected_array(features, selected)
    k = idx.size
    if k < 2:
        return 0.0
    cos = _pairwise_cosines(features, idx)
    dissim = 1.0 - cos
    np.fill_diagonal(dissim, 0.0)
    return float(dissim.sum() / (k * (k - 1)))


def total_reward(combo: str, features: Array, selected) -> RewardBreakdown:
    """Combined reward for one of the configured component sets."""
    combo = COMBO_ALIASES.get(combo, combo)
    if combo not in REWARD_COMBOS:
        raise ValueError(f"unknown reward combination '{combo}' "
                         f"(expected one of {sorted(REWARD_COMBOS)} or r1..r5)")
    parts = REWARD_COMBOS[combo]
    r_rep = reward_rep(features, selected)
    r_sim = reward_sim(features, selected)
    r_div = reward_div(features, selected) if "div" in parts else None
    values = {"rep": r_rep, "sim": r_sim, "div": r_div}
    total = sum(values[p] for p in parts)
    return RewardBreakdown(r_rep=r_rep, r_sim=r_sim, r_div=r_div, total=float(total))
