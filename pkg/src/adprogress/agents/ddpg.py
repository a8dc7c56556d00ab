"""Deep deterministic policy gradient with target networks."""

from __future__ import annotations

import numpy as np

from ..neural import Adam, Network, backward, forward
from .core import AgentConfig, ReplayBuffer, polyak_update


def critic_input(obs, actions, action_limit: float) -> np.ndarray:
    # critics see actions rescaled to [-1, 1]
    return np.concatenate([obs, np.asarray(actions) / action_limit], axis=-1)


def actor_action(actor: Network, obs, action_limit: float, theta=None) -> tuple[np.ndarray, list]:
    u, cache = forward(actor, obs, theta)
    return action_limit * np.tanh(u), cache


def ddpg_targets(actor_targ: Network, critic_targ: Network, batch: dict, gamma_disc: float,
                 action_limit: float) -> np.ndarray:
    """Bellman targets ``r + gamma (1 - done) Q_targ(s', mu_targ(s'))``."""
    a2, _ = actor_action(actor_targ, batch["next_obs"], action_limit)
    q2 = forward(critic_targ, critic_input(batch["next_obs"], a2, action_limit))[0][:, 0]
    return batch["rewards"] + gamma_disc * (1.0 - batch["dones"]) * q2


def critic_step(critic: Network, opt: Adam, x, targets) -> float:
    q, cache = forward(critic, x)
    err = q[:, 0] - targets
    g, _ = backward(critic, cache, (2.0 * err / len(err))[:, None])
    critic.theta = opt.step(critic.theta, g)
    return float(np.mean(err ** 2))


def ddpg_update(actor: Network, critic: Network, targets: dict[str, Network], opts: dict[str, Adam],
                buffer: ReplayBuffer, config: AgentConfig, rng: np.random.Generator,
                action_limit: float) -> dict:
    """One critic step on the mean-squared Bellman error, one actor ascent step on Q(s, mu(s))."""
    if len(buffer) == 0:
        raise ValueError("replay buffer is empty")
    batch = buffer.sample(min(config.replay_minibatch, len(buffer)), rng)
    y = ddpg_targets(targets["actor"], targets["critic"], batch, config.gamma_disc, action_limit)
    critic_loss = critic_step(critic, opts["critic"], critic_input(batch["obs"], batch["actions"], action_limit), y)

    obs = batch["obs"]
    n = len(obs)
    u, a_cache = forward(actor, obs)
    squashed = np.tanh(u)
    q, c_cache = forward(critic, np.concatenate([obs, squashed], axis=-1))
    _, dx = backward(critic, c_cache, np.full((n, 1), -1.0 / n))  # descend -mean Q
    d_u = dx[:, obs.shape[1]:] * (1.0 - squashed ** 2)
    g_actor, _ = backward(actor, a_cache, d_u)
    actor.theta = opts["actor"].step(actor.theta, g_actor)

    targets["actor"].theta = polyak_update(targets["actor"].theta, actor.theta, config.tau_polyak)
    targets["critic"].theta = polyak_update(targets["critic"].theta, critic.theta, config.tau_polyak)
    return {"critic_loss": critic_loss, "actor_q": float(np.mean(q))}
