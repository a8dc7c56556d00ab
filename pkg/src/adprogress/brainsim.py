"""Differential-equation brain simulator exposed as an episodic RL environment.

The brain is a small graph of regions (hippocampus and prefrontal cortex by
default). Each region carries a size ``X``, an instantaneous amyloid load
``D`` and the information processing ``I`` it contributed last year. An agent
chooses per-region changes ``dI``; the simulator turns them into activity,
cognition and energetic cost, scores the year with the mismatch-vs-cost
reward, then integrates amyloid diffusion and atrophy forward one year.

Every numerical function accepts arrays whose last axis indexes regions, so
the same code drives a single environment or a lockstep batch of them.
Parameters in :class:`ModelParams` may likewise be scalars or per-environment
vectors (see :meth:`ModelParams.stack`).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any, Sequence

import numpy as np

SIZE_FLOOR = 1e-6
DEFAULT_ACTION_LIMIT = 2.0
DEFAULT_REWARD_CLIP = 2000.0
REGION_NAMES = ("HC", "PFC")


class SimulationError(ValueError):
    """Invalid simulator input."""


class DegenerateStateError(SimulationError):
    """A region size is zero or negative where activity must be computed."""


def _as_rate(value: Any) -> np.ndarray:
    # scalars broadcast as-is; per-env vectors gain a trailing region axis
    arr = np.asarray(value, dtype=np.float64)
    return arr[..., None] if arr.ndim else arr


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------


def laplacian(adjacency: Any) -> np.ndarray:
    """Graph Laplacian ``deg(A) - A`` of a symmetric nonnegative adjacency."""
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise SimulationError(f"adjacency must be square, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12):
        raise SimulationError("adjacency must be symmetric")
    if np.any(a < 0):
        raise SimulationError("adjacency weights must be nonnegative")
    if np.any(np.diag(a) != 0):
        raise SimulationError("adjacency must have a zero diagonal")
    return np.diag(a.sum(axis=1)) - a


@dataclass(frozen=True)
class BrainGraph:
    """Regions and tract weights. ``laplacian`` is derived on construction."""

    adjacency: np.ndarray
    region_names: tuple[str, ...] = REGION_NAMES
    laplacian: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        adj = np.array(self.adjacency, dtype=np.float64)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "laplacian", laplacian(adj))
        if len(self.region_names) != adj.shape[0]:
            raise SimulationError(
                f"{len(self.region_names)} region names for {adj.shape[0]} regions"
            )
        object.__setattr__(self, "region_names", tuple(self.region_names))

    @property
    def n_regions(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def two_region(cls, weight: float = 1.0) -> "BrainGraph":
        return cls(np.array([[0.0, weight], [weight, 0.0]]), REGION_NAMES)

    def feature_names(self) -> list[str]:
        """Observation feature names in observation order."""
        names = [f"X_{r}" for r in self.region_names]
        names += [f"D_{r}" for r in self.region_names]
        names += [f"I_{r}(t-1)" for r in self.region_names]
        return names

    def action_names(self) -> list[str]:
        return [f"dI_{r}" for r in self.region_names]


# ---------------------------------------------------------------------------
# Parameters, state, configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelParams:
    """Rate constants of the dynamics plus the reward trade-off.

    Fields may hold per-environment arrays (one entry per lockstep
    environment); every function here broadcasts them against the region axis.
    """

    alpha1: Any = 0.05
    alpha2: Any = 0.02
    beta: Any = 0.1
    gamma_act: Any = 2.0
    lambda_tradeoff: Any = 1.0
    c_task: Any = 10.0

    def __post_init__(self) -> None:
        for name in ("alpha1", "alpha2", "beta", "gamma_act", "lambda_tradeoff"):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(value)) or np.any(value < 0):
                raise SimulationError(f"{name} must be finite and >= 0")
        c_task = np.asarray(self.c_task, dtype=np.float64)
        if not np.all(np.isfinite(c_task)) or np.any(c_task <= 0):
            raise SimulationError("c_task must be > 0")

    @classmethod
    def stack(cls, params: Sequence["ModelParams"]) -> "ModelParams":
        """Combine per-patient parameters into one vectorized instance."""
        return cls(**{
            f.name: np.array([float(getattr(p, f.name)) for p in params])
            for f in fields(cls)
        })

    def take(self, index: Any) -> "ModelParams":
        """Select environments from a stacked instance."""
        out = {}
        for f in fields(self):
            value = np.asarray(getattr(self, f.name))
            out[f.name] = value[index] if value.ndim else value
        return ModelParams(**out)

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass(frozen=True)
class EnvConfig:
    """Episode and integrator settings.

    ``horizon`` counts transitions: 10 yearly steps give 11 time points
    (baseline plus ten follow-up years).
    """

    horizon: int = 10
    dt: float = 1.0
    substeps: int = 100
    action_limit: float = DEFAULT_ACTION_LIMIT
    reward_clip: float = DEFAULT_REWARD_CLIP
    info_split: str = "size"

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise SimulationError("horizon must be >= 1")
        if self.dt <= 0 or self.substeps < 1:
            raise SimulationError("dt must be > 0 and substeps >= 1")
        if self.action_limit <= 0 or self.reward_clip <= 0:
            raise SimulationError("action_limit and reward_clip must be > 0")
        if self.info_split not in ("size", "uniform"):
            raise SimulationError(f"unknown info_split {self.info_split!r}")


@dataclass(frozen=True)
class BrainState:
    year: int
    size: np.ndarray
    amyloid: np.ndarray
    info_prev: np.ndarray
    amyloid_total: np.ndarray

    def features(self) -> np.ndarray:
        """Unscaled observation vector ``(X, D, I(t-1))``."""
        return np.concatenate([self.size, self.amyloid, self.info_prev], axis=-1)


@dataclass(frozen=True)
class StepOutcome:
    next_state: BrainState
    reward: Any
    derived: dict[str, np.ndarray]
    done: bool
    degenerate: Any = False


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


def diffuse_amyloid(amyloid, H, beta, dt: float, substeps: int) -> np.ndarray:
    """Euler-integrate ``dD/dt = -beta H D`` over ``dt`` in ``substeps`` steps."""
    if substeps < 1:
        raise SimulationError("substeps must be >= 1")
    if dt <= 0:
        raise SimulationError("dt must be > 0")
    d = np.array(amyloid, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    rate = _as_rate(beta) * (dt / substeps)
    for _ in range(substeps):
        d = d - rate * (d @ H)
    return d


def closed_form_diffusion_2node(d0, edge_weight: float, beta: float, t: float) -> np.ndarray:
    """Exact solution of the two-region diffusion ODE.

    The 2-node Laplacian has eigenvalues 0 (mean mode) and ``2w`` (difference
    mode), so the deviation from the mean decays as ``exp(-2 beta w t)``.
    """
    d0 = np.asarray(d0, dtype=np.float64)
    if d0.shape != (2,):
        raise SimulationError(f"closed form needs exactly 2 regions, got shape {d0.shape}")
    mean = d0.mean()
    return mean + (d0 - mean) * np.exp(-2.0 * beta * edge_weight * t)


def activity(info, size, gamma_act) -> np.ndarray:
    size = np.asarray(size, dtype=np.float64)
    if np.any(size <= 0):
        raise DegenerateStateError("region size must be > 0 to compute activity")
    return _as_rate(gamma_act) * np.asarray(info, dtype=np.float64) / size


def cognition(info) -> Any:
    return np.sum(np.asarray(info, dtype=np.float64), axis=-1)


def energetic_cost(act) -> Any:
    return np.sum(np.asarray(act, dtype=np.float64), axis=-1)


def update_size(size, amyloid, act, alpha1, alpha2, dt: float) -> np.ndarray:
    """One Euler step of ``dX/dt = -alpha1 D - alpha2 Y``, floored at ``SIZE_FLOOR``."""
    if dt <= 0:
        raise SimulationError("dt must be > 0")
    dxdt = -_as_rate(alpha1) * np.asarray(amyloid, dtype=np.float64) - _as_rate(alpha2) * np.asarray(act, dtype=np.float64)
    return np.maximum(np.asarray(size, dtype=np.float64) + dt * dxdt, SIZE_FLOOR)


def reward(cognition_now, cost_now, params: ModelParams,
           reward_clip: float = DEFAULT_REWARD_CLIP) -> Any:
    raw = -(np.asarray(params.lambda_tradeoff) * (np.asarray(params.c_task) - cognition_now)
            + cost_now)
    return np.clip(raw, -reward_clip, reward_clip)


def project_action(info_prev, delta, params: ModelParams,
                   action_limit: float = DEFAULT_ACTION_LIMIT) -> np.ndarray:
    """Apply a clipped change to ``info_prev`` and enforce ``0 <= I``, ``sum(I) <= c_task``.

    Excess total is removed by rescaling the whole vector, which keeps the
    regional proportions of the candidate.
    """
    cand = np.asarray(info_prev, dtype=np.float64) + np.clip(delta, -action_limit, action_limit)
    cand = np.maximum(cand, 0.0)
    total = cand.sum(axis=-1, keepdims=True)
    c_task = _as_rate(params.c_task)
    over = total > c_task
    scale = np.divide(c_task, total, out=np.ones_like(total), where=over)
    return cand * scale


def split_cognition(cog, size, mode: str = "size") -> np.ndarray:
    """Distribute a total cognition across regions (proportional to size or uniformly)."""
    size = np.asarray(size, dtype=np.float64)
    cog = _as_rate(cog)
    if mode == "size":
        return cog * size / size.sum(axis=-1, keepdims=True)
    if mode == "uniform":
        return cog * np.ones_like(size) / size.shape[-1]
    raise SimulationError(f"unknown split mode {mode!r}")


def env_reset(patient, params: ModelParams, graph: BrainGraph,
              config: EnvConfig | None = None) -> BrainState:
    """Initial state from a patient's baseline measurements.

    ``patient`` needs ``baseline_size``, ``baseline_amyloid`` and
    ``baseline_cognition`` (normalized 0-10 scale).
    """
    config = config or EnvConfig()
    try:
        size = np.array(patient.baseline_size, dtype=np.float64)
        amyloid = np.array(patient.baseline_amyloid, dtype=np.float64)
        cog = patient.baseline_cognition
    except AttributeError as exc:
        raise SimulationError(f"patient is missing a baseline field: {exc}") from None
    if cog is None or not np.isfinite(cog):
        raise SimulationError("patient has no baseline cognition")
    if size.shape != (graph.n_regions,) or amyloid.shape != (graph.n_regions,):
        raise SimulationError("baseline vectors must have one entry per region")
    if np.any(size <= 0):
        raise SimulationError("baseline sizes must be > 0")
    info = split_cognition(float(cog), size, config.info_split)
    return BrainState(0, size, amyloid, info, np.zeros_like(amyloid))


def reset_batch(patients: Sequence, graph: BrainGraph,
                config: EnvConfig | None = None) -> BrainState:
    """Lockstep version of :func:`env_reset` over several patients."""
    states = [env_reset(p, ModelParams(), graph, config) for p in patients]
    return BrainState(
        0,
        np.stack([s.size for s in states]),
        np.stack([s.amyloid for s in states]),
        np.stack([s.info_prev for s in states]),
        np.stack([s.amyloid_total for s in states]),
    )


def env_step(state: BrainState, action, params: ModelParams, graph: BrainGraph,
             config: EnvConfig | None = None) -> StepOutcome:
    """Advance one year.

    Order: project the action, compute activity/cognition/cost and the reward
    at the start of the year, then co-integrate amyloid diffusion and atrophy
    with ``config.substeps`` Euler steps (activity re-evaluated on the
    shrinking size, information processing held for the year), accumulating
    total amyloid by the trapezoid rule.
    """
    config = config or EnvConfig()
    if state.year >= config.horizon:
        raise SimulationError(f"episode already finished at year {state.year}")
    info = project_action(state.info_prev, action, params, config.action_limit)
    act = activity(info, state.size, params.gamma_act)
    cog = cognition(info)
    cost = energetic_cost(act)
    r = reward(cog, cost, params, config.reward_clip)

    h = config.dt / config.substeps
    H = graph.laplacian
    diff_rate = _as_rate(params.beta) * h
    a1 = _as_rate(params.alpha1)
    a2 = _as_rate(params.alpha2)
    gamma = _as_rate(params.gamma_act)
    d = np.array(state.amyloid, dtype=np.float64)
    x = np.array(state.size, dtype=np.float64)
    phi = np.array(state.amyloid_total, dtype=np.float64)
    for _ in range(config.substeps):
        y = gamma * info / x
        x = np.maximum(x + h * (-a1 * d - a2 * y), SIZE_FLOOR)
        d_next = d - diff_rate * (d @ H)
        phi = phi + 0.5 * h * (d + d_next)
        d = d_next

    degenerate = np.all(x <= SIZE_FLOOR, axis=-1)
    year = state.year + 1
    nxt = BrainState(year, x, d, info, phi)
    done = year >= config.horizon or bool(np.all(degenerate))
    return StepOutcome(
        nxt, r, {"cognition": cog, "cost": cost, "activity": act}, done,
        degenerate if np.ndim(degenerate) else bool(degenerate),
    )


def observe(state: BrainState, scaler) -> np.ndarray:
    """Scaled observation; ``scaler`` must be fitted (see ``cohort.fit_scaler``)."""
    return scaler.transform(state.features())


def cost_efficient_action(state: BrainState, params: ModelParams,
                          action_limit: float = DEFAULT_ACTION_LIMIT) -> np.ndarray:
    """Myopically reward-optimal change in information processing.

    The yearly reward is linear in ``I`` with per-region coefficient
    ``lambda - gamma / X_v``. Within the box reachable this year and the
    ``c_task`` budget, regions with a positive coefficient are filled in
    descending order of that coefficient; the rest drop as fast as allowed.
    """
    info_prev = np.asarray(state.info_prev, dtype=np.float64)
    lo = np.maximum(info_prev - action_limit, 0.0)
    hi = info_prev + action_limit
    gain = _as_rate(params.lambda_tradeoff) - _as_rate(params.gamma_act) / state.size
    gain = np.broadcast_to(gain, info_prev.shape)
    info = lo.copy()
    budget = np.broadcast_to(np.asarray(params.c_task, dtype=np.float64),
                             info_prev.shape[:-1]) - lo.sum(axis=-1)
    budget = np.maximum(budget, 0.0)
    order = np.argsort(-gain, axis=-1, kind="stable")
    for rank in range(info_prev.shape[-1]):
        idx = order[..., rank:rank + 1]
        g = np.take_along_axis(gain, idx, axis=-1)[..., 0]
        room = (np.take_along_axis(hi, idx, axis=-1) - np.take_along_axis(lo, idx, axis=-1))[..., 0]
        add = np.where(g > 0, np.minimum(room, budget), 0.0)
        cur = np.take_along_axis(info, idx, axis=-1)[..., 0]
        np.put_along_axis(info, idx, (cur + add)[..., None], axis=-1)
        budget = budget - add
    return info - info_prev



def simulate(state: BrainState, action_fn, params: ModelParams, graph: BrainGraph,
             config: EnvConfig | None = None) -> dict[str, np.ndarray]:
    """Roll a lockstep batch from ``state`` to the horizon under ``action_fn(state)``.

    Returns per-year logs with a leading batch axis: ``cognition`` (n, H+1)
    starting with the baseline total, ``size``/``amyloid``/``info`` (n, H+1, V),
    ``activity`` (n, H, V), ``reward`` (n, H) and ``degenerate`` (n,).
    Environments that degenerate keep their last valid values.
    """
    config = config or EnvConfig()
    n = state.size.shape[0]
    alive = np.ones(n, dtype=bool)
    cog = [cognition(state.info_prev)]
    sizes, amyloids, infos = [state.size], [state.amyloid], [state.info_prev]
    acts, rewards = [], []
    for _ in range(config.horizon - state.year):
        step = env_step(state, action_fn(state), params, graph, config)
        nxt = step.next_state
        keep = alive[:, None]
        nxt = BrainState(
            nxt.year,
            np.where(keep, nxt.size, state.size),
            np.where(keep, nxt.amyloid, state.amyloid),
            np.where(keep, nxt.info_prev, state.info_prev),
            np.where(keep, nxt.amyloid_total, state.amyloid_total),
        )
        cog.append(np.where(alive, step.derived["cognition"], cog[-1]))
        acts.append(np.where(keep, step.derived["activity"], 0.0))
        rewards.append(np.where(alive, step.reward, 0.0))
        alive = alive & ~np.asarray(step.degenerate, dtype=bool)
        sizes.append(nxt.size)
        amyloids.append(nxt.amyloid)
        infos.append(nxt.info_prev)
        state = nxt
    return {
        "cognition": np.stack(cog, axis=1),
        "size": np.stack(sizes, axis=1),
        "amyloid": np.stack(amyloids, axis=1),
        "info": np.stack(infos, axis=1),
        "activity": np.stack(acts, axis=1),
        "reward": np.stack(rewards, axis=1),
        "degenerate": ~alive,
    }
