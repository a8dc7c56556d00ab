"""Proximal policy optimization with the clipped surrogate and an entropy bonus."""

from __future__ import annotations

import numpy as np

from ..neural import Adam, GaussianPolicy, Network, forward, gaussian_logprob
from .core import AgentConfig, RolloutBatch, fit_value, logprob_grad


def clipped_surrogate(ratio, adv, clip_eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``min(r A, clip(r, 1-eps, 1+eps) A)`` and its derivative in ``r``.

    The derivative is zero exactly where the clipped branch is the minimum,
    i.e. where the ratio has already moved past the band in the direction
    the advantage favours.
    """
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    objective = np.minimum(unclipped, clipped)
    d_ratio = np.where(unclipped <= clipped, adv, 0.0)
    return objective, d_ratio


def ppo_update(policy: GaussianPolicy, policy_opt: Adam, value_net: Network, value_opt: Adam,
               batch: RolloutBatch, config: AgentConfig, rng: np.random.Generator) -> dict:
    obs, actions = batch.obs, batch.actions
    adv = batch.standardized_advantages()
    logp_old = batch.logprobs
    n = len(adv)
    clip_frac = []
    objective = 0.0
    for _ in range(config.epochs_per_update):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            i = perm[start:start + config.minibatch_size]
            mu, cache = forward(policy.mean_net, obs[i])
            ratio = np.exp(gaussian_logprob(actions[i], mu, policy.log_std) - logp_old[i])
            obj, d_ratio = clipped_surrogate(ratio, adv[i], config.clip_eps)
            if not np.all(np.isfinite(obj)):
                raise FloatingPointError("non-finite PPO objective")
            objective = float(np.mean(obj))
            clip_frac.append(float(np.mean(d_ratio == 0)))
            # d ratio / d theta = ratio * d logp / d theta
            ascent = logprob_grad(policy, cache, mu, actions[i], d_ratio * ratio / len(i))
            ascent[policy.mean_net.n_params:] += config.entropy_coef  # d entropy / d log_std
            policy.set_params(policy_opt.step(policy.get_params(), -ascent))
    value_loss = fit_value(value_net, value_opt, obs, batch.returns, config.epochs_per_update,
                           config.minibatch_size, rng)
    return {"objective": objective, "clip_fraction": float(np.mean(clip_frac)) if clip_frac else 0.0,
            "value_loss": value_loss}
