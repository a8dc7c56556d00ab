"""Training loops for the four agents with validation-based snapshot selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .. import brainsim
from ..brainsim import BrainGraph, EnvConfig, ModelParams
from ..cohort import ObservationScaler, ParamMap, PatientRecord, fit_scaler, patient_params
from ..neural import Adam, GaussianPolicy, PolicySnapshot, forward, gaussian_sample, mlp_init, squash
from .core import AgentConfig, CohortEnv, ReplayBuffer, collect_rollouts
from .ddpg import ddpg_update
from .ppo import ppo_update
from .sac import policy_head, sac_update
from .trpo import trpo_update

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    snapshot: PolicySnapshot
    curve: list[dict]
    update_stats: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    initial_params: dict[str, np.ndarray] = field(default_factory=dict)
    final_params: dict[str, np.ndarray] = field(default_factory=dict)


def predict_cognition(snapshot: PolicySnapshot, patients: Sequence[PatientRecord],
                      params: Sequence[ModelParams], graph: BrainGraph,
                      config: EnvConfig | None = None) -> dict[str, np.ndarray]:
    """Deterministic rollouts of ``snapshot`` from each patient's baseline (see ``brainsim.simulate``)."""
    state = brainsim.reset_batch(patients, graph, config)
    return brainsim.simulate(state, lambda s: snapshot.act(snapshot.scale(s.features())),
                             ModelParams.stack(params), graph, config)


def trajectory_errors(predicted, patients: Sequence[PatientRecord]) -> np.ndarray:
    """Prediction minus observed normalized score for every observed follow-up year."""
    truth = np.stack([p.normalized_scores() for p in patients])[:, 1:]
    err = np.asarray(predicted)[:, 1:] - truth
    return err[~np.isnan(truth)]


def _mae(snapshot, patients, params, graph, config) -> float:
    if not patients:
        return float("nan")
    pred = predict_cognition(snapshot, patients, params, graph, config)["cognition"]
    err = trajectory_errors(pred, patients)
    return float(np.mean(np.abs(err))) if err.size else float("nan")


class _Agent:
    """Uniform facade over the per-algorithm networks and updates."""

    def __init__(self, cfg: AgentConfig, obs_dim: int, act_dim: int, action_limit: float,
                 rng: np.random.Generator):
        self.cfg, self.limit = cfg, action_limit
        hidden = list(cfg.hidden_sizes)
        seed = lambda: int(rng.integers(2**63))  # noqa: E731
        kind = cfg.kind
        if kind in ("TRPO", "PPO"):
            self.policy = GaussianPolicy.create([obs_dim, *hidden, act_dim], seed(), cfg.init_std)
            self.value = mlp_init([obs_dim, *hidden, 1], seed())
            self.value_opt = Adam(self.value.n_params, cfg.value_lr, "value")
            self.value_scale: float | None = None
            if kind == "PPO":
                self.policy_opt = Adam(self.policy.n_params, cfg.policy_lr, "policy")
        elif kind == "DDPG":
            self.actor = mlp_init([obs_dim, *hidden, act_dim], seed(), out_scale=0.01)
            self.critic = mlp_init([obs_dim + act_dim, *hidden, 1], seed())
            self.targets = {"actor": self.actor.copy(), "critic": self.critic.copy()}
            self.opts = {"actor": Adam(self.actor.n_params, cfg.policy_lr, "actor"),
                         "critic": Adam(self.critic.n_params, cfg.critic_lr, "critic")}
        else:
            self.actor = mlp_init([obs_dim, *hidden, 2 * act_dim], seed(), out_scale=0.01)
            self.q1 = mlp_init([obs_dim + act_dim, *hidden, 1], seed())
            self.q2 = mlp_init([obs_dim + act_dim, *hidden, 1], seed())
            self.q_targets = (self.q1.copy(), self.q2.copy())
            self.log_alpha = np.array([np.log(cfg.sac_alpha)]) if cfg.sac_alpha > 0 else np.array([-np.inf])
            self.opts = {"policy": Adam(self.actor.n_params, cfg.policy_lr, "policy"),
                         "q1": Adam(self.q1.n_params, cfg.critic_lr, "q1"),
                         "q2": Adam(self.q2.n_params, cfg.critic_lr, "q2"),
                         "alpha": Adam(1, cfg.alpha_lr, "log_alpha")}

    @property
    def on_policy(self) -> bool:
        return self.cfg.kind in ("TRPO", "PPO")

    def params(self) -> dict[str, np.ndarray]:
        """Every trainable array, for no-op checks."""
        if self.on_policy:
            return {"policy": self.policy.get_params(), "value": self.value.theta.copy()}
        if self.cfg.kind == "DDPG":
            return {"actor": self.actor.theta.copy(), "critic": self.critic.theta.copy()}
        return {"policy": self.actor.theta.copy(), "q1": self.q1.theta.copy(),
                "q2": self.q2.theta.copy(), "log_alpha": self.log_alpha.copy()}

    def snapshot(self, scaler: ObservationScaler) -> PolicySnapshot:
        kind = self.cfg.kind
        if self.on_policy:
            return PolicySnapshot(kind, "gaussian", self.policy.mean_net.copy(), scaler.low, scaler.high,
                                  self.limit, self.policy.log_std.copy())
        head = "tanh" if kind == "DDPG" else "squashed"
        return PolicySnapshot(kind, head, self.actor.copy(), scaler.low, scaler.high, self.limit)

    def explore(self, obs, rng: np.random.Generator) -> np.ndarray:
        if self.cfg.kind == "DDPG":
            a = self.limit * np.tanh(forward(self.actor, obs)[0])
            a = a + self.cfg.exploration_noise * rng.standard_normal(a.shape)
            return np.clip(a, -self.limit, self.limit)
        mean, log_std, _, _ = policy_head(self.actor, obs)
        return squash(mean, log_std, rng.standard_normal(mean.shape), self.limit)[0]

    def off_policy_update(self, buffer: ReplayBuffer, rng: np.random.Generator) -> dict:
        if self.cfg.kind == "DDPG":
            return ddpg_update(self.actor, self.critic, self.targets, self.opts, buffer, self.cfg, rng,
                               self.limit)
        stats, self.log_alpha = sac_update(self.actor, self.q1, self.q2, self.q_targets, self.opts,
                                           self.log_alpha, buffer, self.cfg, rng, self.limit)
        return stats


def _on_policy_epoch(agent: _Agent, env: CohortEnv, rng: np.random.Generator) -> tuple[float, dict]:
    cfg = agent.cfg
    batch = collect_rollouts(
        env, lambda o, r: gaussian_sample(agent.policy, o, r),
        lambda o: (agent.value_scale or 1.0) * forward(agent.value, o)[0][:, 0],
        cfg.batch_size, rng, cfg.gamma_disc, cfg.lambda_gae,
    )
    fit_batch = batch
    if cfg.normalize_values:
        # value net regresses returns divided by a running RMS of the returns
        rms = float(np.sqrt(np.mean(batch.returns ** 2)))
        if agent.value_scale is None:
            agent.value_scale = rms if rms > 0 else 1.0
        elif rms > 0:
            agent.value_scale = 0.9 * agent.value_scale + 0.1 * rms
        fit_batch = replace(batch, returns=batch.returns / agent.value_scale)
    if cfg.kind == "TRPO":
        stats = trpo_update(agent.policy, agent.value, agent.value_opt, fit_batch, cfg, rng)
    else:
        stats = ppo_update(agent.policy, agent.policy_opt, agent.value, agent.value_opt, fit_batch, cfg, rng)
    ret = batch.episode_returns
    return (float(np.mean(ret)) if ret.size else float(np.sum(batch.rewards))), stats


class _OffPolicyRunner:
    """Lockstep environments feeding a replay buffer across epochs."""

    def __init__(self, agent: _Agent, env: CohortEnv, rng: np.random.Generator):
        cfg = agent.cfg
        self.agent, self.env = agent, env
        self.buffer = ReplayBuffer(env.obs_dim, env.act_dim, cfg.replay_capacity)
        self.n_envs = cfg.n_envs
        self.total_steps = 0
        self.pending_updates = 0.0
        self._reset(rng)

    def _reset(self, rng) -> None:
        self.obs = self.env.reset(rng.integers(0, len(self.env), self.n_envs))
        self.alive = np.ones(self.n_envs, dtype=bool)
        self.ep_return = np.zeros(self.n_envs)

    def epoch(self, rng: np.random.Generator) -> tuple[float, dict]:
        cfg, agent = self.agent.cfg, self.agent
        finished, stats = [], {}
        steps = 0
        while steps < cfg.batch_size:
            if self.total_steps < cfg.warmup_steps:
                a = rng.uniform(-agent.limit, agent.limit, (self.n_envs, self.env.act_dim))
            else:
                a = agent.explore(self.obs, rng)
            nxt, r, term = self.env.step(a)
            live = self.alive
            self.buffer.push(self.obs[live], a[live], r[live], nxt[live], term[live].astype(float))
            self.ep_return[live] += r[live]
            n_new = int(live.sum())
            steps += n_new
            self.total_steps += n_new
            ended = live & term
            finished.extend(self.ep_return[ended].tolist())
            self.alive = live & ~term
            self.obs = nxt
            if not self.alive.any() or self.env.state.year >= self.env.horizon:
                self._reset(rng)
            if self.total_steps >= cfg.warmup_steps and len(self.buffer) >= cfg.replay_minibatch:
                self.pending_updates += n_new * cfg.updates_per_step
                if self.pending_updates >= cfg.update_every * cfg.updates_per_step:
                    for _ in range(int(self.pending_updates)):
                        stats = agent.off_policy_update(self.buffer, rng)
                    self.pending_updates -= int(self.pending_updates)
        return (float(np.mean(finished)) if finished else float("nan")), stats


def train(agent_config: AgentConfig, train_patients: Sequence[PatientRecord],
          validation_patients: Sequence[PatientRecord] = (), graph: BrainGraph | None = None,
          env_config: EnvConfig | None = None, param_map: ParamMap | None = None,
          scaler: ObservationScaler | None = None, rng: np.random.Generator | None = None,
          ) -> TrainResult:
    """Train one agent and keep the snapshot with the lowest validation MAE.

    Without validation patients the final policy is kept. The learning
    curve has one row per epoch: ``epoch``, ``mean_return`` (mean
    undiscounted return of the episodes finished that epoch) and
    ``validation_mae`` (NaN on epochs that are not evaluated).
    """
    cfg = agent_config
    graph = graph or BrainGraph.two_region()
    env_config = env_config or EnvConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    train_patients = list(train_patients)
    validation_patients = list(validation_patients)
    if not train_patients:
        raise ValueError("need at least one training patient")
    scaler = scaler or fit_scaler(train_patients, graph, env_config)
    train_params = [patient_params(p, param_map) for p in train_patients]
    val_params = [patient_params(p, param_map) for p in validation_patients]
    env = CohortEnv(train_patients, train_params, graph, env_config, scaler)

    agent = _Agent(cfg, env.obs_dim, env.act_dim, env_config.action_limit, rng)
    initial = agent.params()
    runner = None if agent.on_policy else _OffPolicyRunner(agent, env, rng)
    best = agent.snapshot(scaler)
    best_mae, best_epoch = np.inf, 0
    curve, all_stats = [], []
    for epoch in range(1, cfg.total_epochs + 1):
        if agent.on_policy:
            mean_return, stats = _on_policy_epoch(agent, env, rng)
        else:
            mean_return, stats = runner.epoch(rng)
        all_stats.append(stats)
        mae = float("nan")
        if validation_patients and (epoch % cfg.eval_every == 0 or epoch == cfg.total_epochs):
            snap = agent.snapshot(scaler)
            mae = _mae(snap, validation_patients, val_params, graph, env_config)
            if mae < best_mae:
                best, best_mae, best_epoch = snap, mae, epoch
        curve.append({"epoch": epoch, "mean_return": mean_return, "validation_mae": mae})
        log.debug("%s epoch %d return %.3f val_mae %.4f", cfg.kind, epoch, mean_return, mae)
    if not validation_patients or best_epoch == 0:
        best, best_epoch = agent.snapshot(scaler), cfg.total_epochs
    best.meta = {"best_epoch": best_epoch, "validation_mae": None if not np.isfinite(best_mae) else best_mae,
                 "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.as_dict().items()}}
    return TrainResult(best, curve, all_stats, best_epoch, initial, agent.params())


def agent_for_inspection(agent_config: AgentConfig, obs_dim: int = 6, act_dim: int = 2,
                         action_limit: float = brainsim.DEFAULT_ACTION_LIMIT, seed: int = 0) -> _Agent:
    """Freshly initialized agent networks, exposed for tests and demos."""
    return _Agent(agent_config, obs_dim, act_dim, action_limit, np.random.default_rng(seed))


__all__ = ["TrainResult", "predict_cognition", "trajectory_errors", "train", "agent_for_inspection"]
