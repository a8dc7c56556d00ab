"""Soft actor-critic with twin critics and optional temperature tuning."""

from __future__ import annotations

import numpy as np

from ..neural import Adam, Network, backward, forward, squash
from .core import AgentConfig, ReplayBuffer, polyak_update
from .ddpg import critic_input, critic_step

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


def policy_head(policy: Network, obs) -> tuple[np.ndarray, np.ndarray, np.ndarray, list]:
    """Split the policy output into mean and clamped log-std."""
    out, cache = forward(policy, obs)
    d = out.shape[-1] // 2
    raw = out[..., d:]
    return out[..., :d], np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), raw, cache


def sac_targets(policy: Network, q_targets: tuple[Network, Network], batch: dict, alpha: float,
                gamma_disc: float, action_limit: float, rng: np.random.Generator) -> dict:
    """Soft Bellman targets using the elementwise minimum of the two target critics."""
    nxt = batch["next_obs"]
    mean, log_std, _, _ = policy_head(policy, nxt)
    a2, logp2, _ = squash(mean, log_std, rng.standard_normal(mean.shape), action_limit)
    x2 = critic_input(nxt, a2, action_limit)
    q1 = forward(q_targets[0], x2)[0][:, 0]
    q2 = forward(q_targets[1], x2)[0][:, 0]
    q_min = np.minimum(q1, q2)
    y = batch["rewards"] + gamma_disc * (1.0 - batch["dones"]) * (q_min - alpha * logp2)
    return {"targets": y, "q1": q1, "q2": q2, "q_min": q_min, "logp": logp2}


def sac_update(policy: Network, q1: Network, q2: Network, q_targets: tuple[Network, Network],
               opts: dict[str, Adam], log_alpha: np.ndarray, buffer: ReplayBuffer, config: AgentConfig,
               rng: np.random.Generator, action_limit: float) -> tuple[dict, np.ndarray]:
    """One soft actor-critic step. Returns ``(stats, new_log_alpha)``."""
    if len(buffer) == 0:
        raise ValueError("replay buffer is empty")
    batch = buffer.sample(min(config.replay_minibatch, len(buffer)), rng)
    alpha = float(np.exp(log_alpha[0]))
    tgt = sac_targets(policy, q_targets, batch, alpha, config.gamma_disc, action_limit, rng)
    x = critic_input(batch["obs"], batch["actions"], action_limit)
    loss1 = critic_step(q1, opts["q1"], x, tgt["targets"])
    loss2 = critic_step(q2, opts["q2"], x, tgt["targets"])

    # policy: minimize mean(alpha * log pi(a~|s) - min_j Q_j(s, a~)) through the reparameterized sample
    obs = batch["obs"]
    n, obs_dim = obs.shape
    mean, log_std, raw, p_cache = policy_head(policy, obs)
    xi = rng.standard_normal(mean.shape)
    a, logp, u = squash(mean, log_std, xi, action_limit)
    xa = critic_input(obs, a, action_limit)
    qa1, c1 = forward(q1, xa)
    qa2, c2 = forward(q2, xa)
    use1 = (qa1[:, 0] <= qa2[:, 0])[:, None]
    _, dx1 = backward(q1, c1, np.where(use1, -1.0 / n, 0.0))
    _, dx2 = backward(q2, c2, np.where(use1, 0.0, -1.0 / n))
    d_a = (dx1 + dx2)[:, obs_dim:] / action_limit
    t = np.tanh(u)
    sigma_xi = np.exp(log_std) * xi
    da_du = action_limit * (1.0 - t ** 2)
    d_mean = alpha / n * 2.0 * t + d_a * da_du
    d_logstd = alpha / n * (-1.0 + 2.0 * t * sigma_xi) + d_a * da_du * sigma_xi
    d_logstd = np.where((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX), d_logstd, 0.0)
    g_pi, _ = backward(policy, p_cache, np.concatenate([d_mean, d_logstd], axis=-1))
    policy.theta = opts["policy"].step(policy.theta, g_pi)

    new_log_alpha = log_alpha
    if config.sac_autotune:
        target_entropy = -float(mean.shape[-1]) if config.target_entropy is None else config.target_entropy
        g_alpha = np.array([-np.mean(logp + target_entropy)])
        new_log_alpha = opts["alpha"].step(log_alpha, g_alpha)

    q_targets[0].theta = polyak_update(q_targets[0].theta, q1.theta, config.tau_polyak)
    q_targets[1].theta = polyak_update(q_targets[1].theta, q2.theta, config.tau_polyak)
    stats = {"q1_loss": loss1, "q2_loss": loss2, "alpha": alpha, "entropy": float(-np.mean(logp)),
             "policy_objective": float(np.mean(np.minimum(qa1, qa2)[:, 0] - alpha * logp))}
    return stats, new_log_alpha
