"""Policy-optimization agents and their training loops."""

from .core import (AGENT_KINDS, AgentConfig, CohortEnv, ReplayBuffer, RolloutBatch, collect_rollouts,
                   conjugate_gradient, gae_advantages, gae_batch, polyak_update)
from .ddpg import ddpg_targets, ddpg_update
from .ppo import clipped_surrogate, ppo_update
from .sac import sac_targets, sac_update
from .train import TrainResult, predict_cognition, train, trajectory_errors
from .trpo import fisher_vector_product, kl_grad, mean_kl, trpo_update

__all__ = [
    "AGENT_KINDS", "AgentConfig", "CohortEnv", "ReplayBuffer", "RolloutBatch", "TrainResult",
    "clipped_surrogate", "collect_rollouts", "conjugate_gradient", "ddpg_targets", "ddpg_update",
    "fisher_vector_product", "gae_advantages", "gae_batch", "kl_grad", "mean_kl", "polyak_update",
    "ppo_update", "predict_cognition", "sac_targets", "sac_update", "train", "trajectory_errors",
    "trpo_update",
]
