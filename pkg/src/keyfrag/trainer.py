"""Episodic policy-gradient training loop.

Each trial is scored once per visit; actions are sampled for N episodes, the
log-policy gradient is weighted by (reward - baseline) and averaged, and a
selection-percentage regularizer is added before a single Adam step. The
applied update ascends the expected reward and descends the balance-weighted
regularizer. Fully deterministic given the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import agent, rewards
from .data_io import Trial, TrialSet, atomic_write_text
from .numerics import AdamState, Array, Rng, adam_step


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    segment_len: int = 16          # L
    episodes: int = 5              # N
    percentage: float = 0.5        # target selection fraction
    balance: float = 0.01          # regularizer weight
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    max_epochs: int = 100
    baseline_momentum: float = 0.9
    seed: int = 0
    agent_variant: str = "full"
    gcn_dim: int = 32
    gru_hidden: int = 256
    reward_combo: str = "rep+sim"

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if not 0.0 < self.percentage < 1.0:
            raise ValueError("percentage must lie strictly inside (0, 1)")
        if self.balance < 0:
            raise ValueError("balance must be >= 0")
        if self.segment_len < 1 or self.max_epochs < 1:
            raise ValueError("segment_len and max_epochs must be >= 1")
        if not 0.0 <= self.baseline_momentum < 1.0:
            raise ValueError("baseline_momentum must lie in [0, 1)")


@dataclass
class BaselineTable:
    """Per-trial moving average of episode-mean rewards. Entries start at 0
    (used as-is in the first update) and are seeded with the first observed
    mean, so they always stay within the observed reward range."""

    momentum: float = 0.9
    values: dict[str, float] = field(default_factory=dict)

    def get(self, trial_id: str) -> float:
        return self.values.get(trial_id, 0.0)

    def update(self, trial_id: str, mean_reward: float) -> float:
        if trial_id not in self.values:
            self.values[trial_id] = float(mean_reward)
        else:
            self.values[trial_id] = (self.momentum * self.values[trial_id]
                                     + (1.0 - self.momentum) * float(mean_reward))
        return self.values[trial_id]


def sampling_regularizer(scores: Array, percentage: float) -> tuple[float, Array]:
    """((mean p) - target)^2 and its gradient w.r.t. every p_t."""
    p = np.asarray(scores, dtype=np.float64)
    diff = float(p.mean() - percentage)
    grad = np.full(p.shape, 2.0 * diff / p.size)
    return diff * diff, grad


def _episode_logit_grad(scores: Array, cfg: TrainConfig, rng: Rng, baseline: float,
                        features: Array, reward_fn=None) -> tuple[Array, list[rewards.RewardBreakdown]]:
    """Aggregate (R_n - b) * (a - p) over N episodes; the network backward is
    linear in this upstream gradient so one pass suffices."""
    dlogit = np.zeros_like(scores)
    breakdowns = []
    for _ in range(cfg.episodes):
        actions = agent.sample_actions(scores, rng)
        selected = np.flatnonzero(actions) + 1
        if reward_fn is not None:
            bd = reward_fn(features, selected)
            if not isinstance(bd, rewards.RewardBreakdown):
                bd = rewards.RewardBreakdown(r_rep=0.0, r_sim=0.0, r_div=None, total=float(bd))
        else:
            bd = rewards.total_reward(cfg.reward_combo, features, selected)
        dlogit += (bd.total - baseline) * (actions - scores)
        breakdowns.append(bd)
    dlogit /= cfg.episodes
    return dlogit, breakdowns


def episode_gradient(trial: Trial, params: agent.AgentParams, cfg: TrainConfig,
                     rng: Rng, baseline: float, reward_fn=None,
                     ) -> tuple[dict[str, Array], list[rewards.RewardBreakdown]]:
    """Baselined policy gradient for one trial, pointing in the ascent
    direction of the expected reward."""
    scores, cache = agent.forward(trial.features, params, cfg.segment_len)
    dlogit, breakdowns = _episode_logit_grad(scores, cfg, rng, baseline,
                                             trial.features, reward_fn)
    grads = agent.backward_from_logit_grad(dlogit, cache, params)
    return grads, breakdowns


@dataclass
class EpochStats:
    epoch: int
    mean_reward: float
    mean_r_rep: float
    mean_r_sim: float
    mean_reg_loss: float


def train(trials: TrialSet, cfg: TrainConfig, reward_fn=None,
          ) -> tuple[agent.AgentParams, list[EpochStats]]:
    """Run the full training loop and return the final parameters plus the
    per-epoch log."""
    if len(trials) == 0:
        raise ValueError("cannot train on an empty trial set")
    rng = Rng(cfg.seed)
    agent_cfg = agent.AgentConfig(feature_dim=trials.feature_dim, variant=cfg.agent_variant,
                                  gcn_dim=cfg.gcn_dim, gru_hidden=cfg.gru_hidden)
    params = agent.init_params(agent_cfg, rng.derive(0))
    adam = AdamState.for_params(params.as_dict(), learning_rate=cfg.learning_rate,
                                weight_decay=cfg.weight_decay)
    baselines = BaselineTable(momentum=cfg.baseline_momentum)
    episode_rng = rng.derive(1)
    shuffle_rng = rng.derive(2)
    log: list[EpochStats] = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(trials))
        totals = np.zeros(4)  # reward, r_rep, r_sim, reg_loss
        for trial_idx in order:
            trial = trials[int(trial_idx)]
            scores, cache = agent.forward(trial.features, params, cfg.segment_len)
            baseline = baselines.get(trial.id)
            dlogit_ascent, breakdowns = _episode_logit_grad(
                scores, cfg, episode_rng, baseline, trial.features, reward_fn)
            reg_loss, dreg_dp = sampling_regularizer(scores, cfg.percentage)
            mean_reward = float(np.mean([bd.total for bd in breakdowns]))
            if not np.isfinite(mean_reward) or not np.isfinite(reg_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, trial '{trial.id}' "
                                    f"(reward={mean_reward}, reg={reg_loss})")
            # Descend balance * regularizer - expected reward.
            dlogit = cfg.balance * dreg_dp * scores * (1.0 - scores) - dlogit_ascent
            grads = agent.backward_from_logit_grad(dlogit, cache, params)
            try:
                adam_step(params.as_dict(), grads, adam)
            except ValueError as exc:
                raise TrainingError(f"epoch {epoch}, trial '{trial.id}': {exc}") from exc
            baselines.update(trial.id, mean_reward)
            totals += (mean_reward,
                       float(np.mean([bd.r_rep for bd in breakdowns])),
                       float(np.mean([bd.r_sim for bd in breakdowns])),
                       reg_loss)
        means = totals / len(trials)
        log.append(EpochStats(epoch=epoch, mean_reward=means[0], mean_r_rep=means[1],
                              mean_r_sim=means[2], mean_reg_loss=means[3]))
    return params, log


def save_train_log(path, log: list[EpochStats], meta: dict | None = None) -> None:
    lines = []
    if meta:
        lines.append("# " + json.dumps(meta, sort_keys=True))
    lines.append("epoch,mean_reward,mean_r_rep,mean_r_sim,mean_reg_loss")
    for row in log:
        lines.append(f"{row.epoch},{row.mean_reward:.17g},{row.mean_r_rep:.17g},"
                     f"{row.mean_r_sim:.17g},{row.mean_reg_loss:.17g}")
    atomic_write_text(path, "\n".join(lines) + "\n")
