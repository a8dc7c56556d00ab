"""Machinery shared by the policy-optimization agents."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .. import brainsim
from ..brainsim import BrainGraph, EnvConfig, ModelParams
from ..neural import Adam, GaussianPolicy, Network, backward, forward

AGENT_KINDS = ("TRPO", "PPO", "DDPG", "SAC")


@dataclass(frozen=True)
class AgentConfig:
    """Hyperparameters for one agent.

    1000 env steps per epoch, 1000 epochs, GAE lambda 0.97, clip range 0.2,
    entropy coefficient 0.02 and a 1M replay buffer; everything else uses
    common defaults for each algorithm family.

    ``trpo_step_frac`` scales the trust-region step before the line search;
    0 freezes the policy (used to check that zero step sizes are a no-op).
    """

    kind: str = "TRPO"
    hidden_sizes: tuple[int, ...] = (32, 32)
    gamma_disc: float = 0.99
    lambda_gae: float = 0.97
    kl_bound: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_coef: float = 0.8
    backtrack_iters: int = 10
    trpo_step_frac: float = 1.0
    clip_eps: float = 0.2
    entropy_coef: float = 0.02
    epochs_per_update: int = 10
    minibatch_size: int = 64
    value_epochs: int = 5
    batch_size: int = 1000
    total_epochs: int = 1000
    init_std: float = 1.0
    replay_capacity: int = 1_000_000
    replay_minibatch: int = 256
    warmup_steps: int = 1000
    update_every: int = 50
    updates_per_step: float = 1.0
    n_envs: int = 10
    tau_polyak: float = 0.005
    exploration_noise: float = 0.1
    sac_alpha: float = 0.2
    sac_autotune: bool = True
    target_entropy: float | None = None
    policy_lr: float = 3e-4
    critic_lr: float = 3e-4
    value_lr: float = 1e-3
    normalize_values: bool = True
    alpha_lr: float = 3e-4
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        kind = self.kind.upper()
        if kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}; expected one of {AGENT_KINDS}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not 0.0 <= self.gamma_disc < 1.0:
            raise ValueError("gamma_disc must be in [0, 1)")
        if not 0.0 <= self.lambda_gae <= 1.0:
            raise ValueError("lambda_gae must be in [0, 1]")
        if self.clip_eps <= 0 or self.kl_bound <= 0:
            raise ValueError("clip_eps and kl_bound must be > 0")
        if self.replay_capacity < self.replay_minibatch:
            raise ValueError("replay_capacity must be >= replay_minibatch")
        if self.batch_size < 1 or self.total_epochs < 0:
            raise ValueError("batch_size must be >= 1 and total_epochs >= 0")
        if not 0.0 <= self.tau_polyak <= 1.0:
            raise ValueError("tau_polyak must be in [0, 1]")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# Environment over a patient pool
# ---------------------------------------------------------------------------


class CohortEnv:
    """Lockstep batch of simulators drawing patients from a fixed pool.

    Observations are scaled with ``scaler``; the episode ends at the horizon
    or when an environment degenerates (all region sizes at the floor).
    """

    def __init__(self, patients: Sequence, params: Sequence[ModelParams], graph: BrainGraph,
                 config: EnvConfig, scaler):
        if len(patients) != len(params) or not patients:
            raise ValueError("need one parameter set per patient and at least one patient")
        self.patients = list(patients)
        self.params = ModelParams.stack(params)
        self.graph = graph
        self.config = config
        self.scaler = scaler
        self._base = brainsim.reset_batch(self.patients, graph, config)
        self.state: brainsim.BrainState | None = None
        self._params: ModelParams | None = None

    @property
    def obs_dim(self) -> int:
        return 3 * self.graph.n_regions

    @property
    def act_dim(self) -> int:
        return self.graph.n_regions

    @property
    def horizon(self) -> int:
        return self.config.horizon

    def __len__(self) -> int:
        return len(self.patients)

    def reset(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        b = self._base
        self.state = brainsim.BrainState(0, b.size[idx], b.amyloid[idx], b.info_prev[idx],
                                         b.amyloid_total[idx])
        self._params = self.params.take(idx)
        return self.scaler.transform(self.state.features())

    def step(self, action) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns ``(next_obs, reward, terminal)`` for every lockstep env."""
        out = brainsim.env_step(self.state, action, self._params, self.graph, self.config)
        self.state = out.next_state
        terminal = np.asarray(out.degenerate, dtype=bool) | (self.state.year >= self.config.horizon)
        return self.scaler.transform(self.state.features()), np.asarray(out.reward), terminal


# ---------------------------------------------------------------------------
# On-policy rollouts and advantages
# ---------------------------------------------------------------------------


def gae_advantages(rewards, values, bootstrap: float, gamma_disc: float,
                   lambda_gae: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates for one episode segment.

    ``bootstrap`` is the value of the state after the last reward (0 for a
    terminal state). Returns ``(advantages, returns)`` with
    ``returns = advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must have the same length")
    next_v = np.append(values[1:], bootstrap)
    delta = rewards + gamma_disc * next_v - values
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = delta[t] + gamma_disc * lambda_gae * running
        adv[t] = running
    return adv, adv + values


def gae_batch(rewards, values, lengths, bootstrap, gamma_disc: float, lambda_gae: float
              ) -> np.ndarray:
    """Vectorized GAE over ``(E, T)`` arrays; entries past ``lengths[e]`` are ignored."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    E, T = rewards.shape
    lengths = np.asarray(lengths)
    adv = np.zeros((E, T))
    running = np.zeros(E)
    for t in range(T - 1, -1, -1):
        last = t == lengths - 1
        inside = t < lengths - 1
        next_v = np.where(last, bootstrap, values[:, t + 1] if t + 1 < T else 0.0)
        delta = rewards[:, t] + gamma_disc * next_v - values[:, t]
        running = np.where(t < lengths, delta + gamma_disc * lambda_gae * np.where(inside, running, 0.0), 0.0)
        adv[:, t] = running
    return adv


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    logprobs: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    episode_lengths: np.ndarray
    episode_returns: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.rewards)

    def standardized_advantages(self) -> np.ndarray:
        a = self.advantages
        return (a - a.mean()) / (a.std() + 1e-8)


PolicyFn = Callable[[np.ndarray, np.random.Generator], tuple[np.ndarray, np.ndarray]]


def collect_rollouts(env: CohortEnv, policy_fn: PolicyFn, value_fn: Callable[[np.ndarray], np.ndarray],
                     steps: int, rng: np.random.Generator, gamma_disc: float = 0.99,
                     lambda_gae: float = 0.97) -> RolloutBatch:
    """Sample exactly ``steps`` transitions from fresh episodes on random patients.

    Episodes run in lockstep and are laid out episode after episode; the
    final episode may be cut short, in which case its advantages bootstrap
    from the value of the state where it was cut.
    """
    H = env.horizon
    E = max(1, math.ceil(steps / H))
    idx = rng.integers(0, len(env), E)
    obs = env.reset(idx)
    O = np.zeros((E, H + 1, env.obs_dim))
    A = np.zeros((E, H, env.act_dim))
    R = np.zeros((E, H))
    LP = np.zeros((E, H))
    V = np.zeros((E, H + 1))
    valid = np.zeros((E, H), dtype=bool)
    alive = np.ones(E, dtype=bool)
    for t in range(H):
        a, logp = policy_fn(obs, rng)
        O[:, t], A[:, t], LP[:, t], V[:, t] = obs, a, logp, value_fn(obs)
        obs, r, term = env.step(a)
        R[:, t] = r
        valid[:, t] = alive
        alive &= ~term
    O[:, H] = obs
    V[:, H] = value_fn(obs)

    lengths = valid.sum(axis=1)
    cum = np.cumsum(lengths)
    keep = np.minimum(lengths, np.maximum(steps - (cum - lengths), 0))
    cut = keep < lengths
    bootstrap = np.where(cut, V[np.arange(E), keep], 0.0)
    # complete episodes end in a terminal state (horizon or degeneracy)
    adv = gae_batch(R, V[:, :H], keep, bootstrap, gamma_disc, lambda_gae)

    mask = np.arange(H)[None, :] < keep[:, None]
    done = np.zeros((E, H), dtype=bool)
    full = (keep == lengths) & (keep > 0)
    done[full, keep[full] - 1] = True
    ep_returns = np.array([R[e, : lengths[e]].sum() for e in range(E) if full[e]])
    return RolloutBatch(
        obs=O[:, :H][mask], actions=A[mask], rewards=R[mask], logprobs=LP[mask], values=V[:, :H][mask],
        dones=done[mask], advantages=adv[mask], returns=(adv + V[:, :H])[mask],
        episode_lengths=keep[keep > 0], episode_returns=ep_returns,
    )


# ---------------------------------------------------------------------------
# Off-policy pieces
# ---------------------------------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity ring buffer of ``(s, a, r, s', done)`` transitions."""

    def __init__(self, obs_dim: int, act_dim: int, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, act_dim))
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, obs, actions, rewards, next_obs, dones) -> None:
        obs = np.atleast_2d(obs)
        n = obs.shape[0]
        pos = (self.cursor + np.arange(n)) % self.capacity
        self.obs[pos] = obs
        self.actions[pos] = np.atleast_2d(actions)
        self.rewards[pos] = np.atleast_1d(rewards)
        self.next_obs[pos] = np.atleast_2d(next_obs)
        self.dones[pos] = np.atleast_1d(dones)
        self.cursor = int((self.cursor + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Uniform minibatch, without replacement inside the minibatch."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        if n > self.size:
            raise ValueError(f"minibatch of {n} exceeds buffer size {self.size}")
        i = rng.choice(self.size, size=n, replace=False)
        return {"obs": self.obs[i], "actions": self.actions[i], "rewards": self.rewards[i],
                "next_obs": self.next_obs[i], "dones": self.dones[i]}


def polyak_update(target_params, online_params, tau: float) -> np.ndarray:
    """``(1 - tau) * target + tau * online``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    target_params = np.asarray(target_params, dtype=np.float64)
    online_params = np.asarray(online_params, dtype=np.float64)
    if target_params.shape != online_params.shape:
        raise ValueError("target and online parameters differ in shape")
    if tau == 0.0:
        return target_params.copy()
    if tau == 1.0 or np.array_equal(target_params, online_params):
        # equal inputs stay bit-identical instead of picking up rounding noise
        return online_params.copy()
    return (1.0 - tau) * target_params + tau * online_params


def conjugate_gradient(apply_A: Callable[[np.ndarray], np.ndarray], b, iters: int = 10,
                       tol: float = 1e-10) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive (semi)definite ``A`` given as a product."""
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(iters):
        if math.sqrt(rr) <= tol:
            break
        Ap = apply_A(p)
        pAp = p @ Ap
        if pAp <= 0:
            break
        step = rr / pAp
        x += step * p
        r -= step * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


# ---------------------------------------------------------------------------
# Gaussian-policy helpers shared by TRPO and PPO
# ---------------------------------------------------------------------------


def logprob_grad(policy: GaussianPolicy, cache: list, mu: np.ndarray, actions: np.ndarray,
                 weights: np.ndarray) -> np.ndarray:
    """Flat gradient of ``sum_i weights_i * log pi(a_i | s_i)``."""
    inv_var = np.exp(-2.0 * policy.log_std)
    diff = actions - mu
    g_net, _ = backward(policy.mean_net, cache, weights[:, None] * diff * inv_var)
    g_ls = np.sum(weights[:, None] * (diff ** 2 * inv_var - 1.0), axis=0)
    return np.concatenate([g_net, g_ls])


def fit_value(value_net: Network, opt: Adam, obs: np.ndarray, targets: np.ndarray, epochs: int,
              minibatch: int, rng: np.random.Generator) -> float:
    """Regress ``value_net`` on ``targets`` with minibatch Adam; returns the final MSE."""
    n = len(targets)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, minibatch):
            i = perm[start:start + minibatch]
            v, cache = forward(value_net, obs[i])
            dv = 2.0 * (v[:, 0] - targets[i]) / len(i)
            g, _ = backward(value_net, cache, dv[:, None])
            value_net.theta = opt.step(value_net.theta, g)
    v = forward(value_net, obs)[0][:, 0]
    return float(np.mean((v - targets) ** 2))
