"""Key-fragment sampling for multivariate time series.

A policy-gradient-trained agent scores every timestep of a feature sequence,
top-K fragments are expanded around the highest-scoring moments, and trials
are clustered without labels via hypergraph spectral clustering.
"""

from .agent import (AgentConfig, AgentParams, forward, grad_log_policy, init_params,
                    sample_actions, segment)
from .clustering import (align_and_score, build_hypergraph, hypergraph_laplacian,
                         pool_trial, recall_at, spectral_cluster, tiou)
from .data_io import (SynthConfig, Trial, TrialSet, extract_stat_features,
                      load_trialset, save_trialset, synth_generate)
from .numerics import AdamState, Rng, adam_step, finite_diff_check, matmul, sym_eigs_smallest
from .rewards import RewardBreakdown, reward_div, reward_rep, reward_sim, total_reward
from .selector import Fragment, SelectConfig, expand_fragment, fragment_indices, select
from .trainer import BaselineTable, TrainConfig, episode_gradient, sampling_regularizer, train

__version__ = "0.1.0"
