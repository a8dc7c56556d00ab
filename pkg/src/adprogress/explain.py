"""Shapley-value attributions of policy actions to observation features.

Absent features are imputed row by row from a background set and the model
output is averaged over the rows (the marginal approximation used by Kernel
SHAP). With six features every coalition can be enumerated, so the default
estimator is exact.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import brainsim
from .brainsim import BrainGraph, EnvConfig, ModelParams
from .neural import PolicySnapshot

log = logging.getLogger(__name__)

MAX_EXACT_FEATURES = 20
EXACT_MODE_LIMIT = 12
MAX_BACKGROUND_ROWS = 100
ATTRIBUTION_COLUMNS = ("patient_id", "year", "fold", "seed", "agent", "action_name", "feature_name",
                       "feature_value", "scaled_value", "phi", "phi0", "output")

ModelFn = Callable[[np.ndarray], np.ndarray]


class ExplainError(ValueError):
    pass


@dataclass(frozen=True)
class BackgroundSet:
    """Reference observations used to fill in features missing from a coalition."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if data.size == 0:
            raise ExplainError("background set is empty")
        object.__setattr__(self, "data", data)

    @property
    def means(self) -> np.ndarray:
        return self.data.mean(axis=0)

    @property
    def n_features(self) -> int:
        return self.data.shape[1]

    @classmethod
    def sample(cls, rows, max_rows: int = MAX_BACKGROUND_ROWS,
               rng: np.random.Generator | None = None) -> "BackgroundSet":
        """At most ``max_rows`` rows drawn without replacement (all rows if fewer)."""
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if len(rows) > max_rows:
            rng = rng if rng is not None else np.random.default_rng(0)
            rows = rows[np.sort(rng.choice(len(rows), max_rows, replace=False))]
        return cls(rows)


def _outputs(model_fn: ModelFn, X: np.ndarray) -> np.ndarray:
    y = np.asarray(model_fn(X), dtype=np.float64)
    return y.reshape(len(X), -1)


def coalition_values(model_fn: ModelFn, x, background: BackgroundSet, masks) -> np.ndarray:
    """Expected output for each coalition mask, shape ``(n_masks, n_outputs)``."""
    x = np.asarray(x, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    bg = background.data
    if x.shape != (bg.shape[1],):
        raise ExplainError("instance and background have different feature counts")
    filled = np.where(masks[:, None, :], x, bg[None, :, :])
    y = _outputs(model_fn, filled.reshape(-1, bg.shape[1]))
    return y.reshape(len(masks), len(bg), -1).mean(axis=1)


def all_masks(n: int) -> np.ndarray:
    """Every subset of ``n`` features as a boolean matrix, row ``i`` encoding the bits of ``i``."""
    return (np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1 == 1


def _select(values: np.ndarray, action_index: int | None) -> np.ndarray:
    return values if action_index is None else values[..., action_index]


def exact_shapley(model_fn: ModelFn, x, background: BackgroundSet,
                  action_index: int | None = None) -> np.ndarray:
    """Shapley values by enumerating all coalitions.

    Returns shape ``(N,)`` for one output or ``(N, n_outputs)`` when
    ``action_index`` is None.
    """
    n = background.n_features
    if n > MAX_EXACT_FEATURES:
        raise ExplainError(f"exact enumeration over {n} features is too large (max {MAX_EXACT_FEATURES})")
    masks = all_masks(n)
    v = coalition_values(model_fn, x, background, masks)
    sizes = masks.sum(axis=1)
    weight = np.array([math.factorial(k) * math.factorial(n - k - 1) / math.factorial(n)
                       for k in range(n)])
    phi = np.zeros((n, v.shape[1]))
    codes = np.arange(2 ** n)
    for s in range(n):
        without = ~masks[:, s]
        lo = codes[without]
        phi[s] = np.sum(weight[sizes[lo], None] * (v[lo | (1 << s)] - v[lo]), axis=0)
    return _select(phi, action_index)


def shapley_kernel_weight(n: int, k: int) -> float:
    """Kernel SHAP weight of a coalition of size ``k`` out of ``n``; infinite at 0 and n."""
    if not 0 <= k <= n:
        raise ExplainError("coalition size out of range")
    if k in (0, n):
        return math.inf
    return (n - 1) / (math.comb(n, k) * k * (n - k))


def _sample_masks(n: int, n_samples: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Coalitions drawn from the kernel distribution; each gets weight 1."""
    sizes = np.arange(1, n)
    p = (n - 1) / (sizes * (n - sizes))
    p = p / p.sum()
    ks = rng.choice(sizes, size=n_samples, p=p)
    masks = np.zeros((n_samples, n), dtype=bool)
    for i, k in enumerate(ks):
        masks[i, rng.choice(n, k, replace=False)] = True
    return masks, np.ones(n_samples)


def _constrained_wls(Z: np.ndarray, y: np.ndarray, w: np.ndarray, total: np.ndarray,
                     ridge: float = 1e-10) -> np.ndarray:
    """Weighted least squares for ``phi`` subject to ``sum(phi) = total``.

    The last coefficient is eliminated through the constraint. Falls back
    to a tiny ridge when the reduced system is singular.
    """
    n = Z.shape[1]
    A = Z[:, :-1] - Z[:, -1:]
    b = y - Z[:, -1:] * total[None, :]
    sw = np.sqrt(w)[:, None]
    M = (A * sw).T @ (A * sw)
    rhs = (A * sw).T @ (b * sw)
    if np.linalg.matrix_rank(M) < n - 1:
        log.warning("kernel SHAP system is singular; solving with ridge %.1e", ridge)
        M = M + ridge * np.eye(n - 1)
    head = np.linalg.solve(M, rhs)
    return np.vstack([head, total[None, :] - head.sum(axis=0, keepdims=True)])


def kernel_shap(model_fn: ModelFn, x, background: BackgroundSet, n_samples: int | None = None,
                action_index: int | None = None, mode: str = "auto",
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Kernel SHAP estimate ``(phi, phi0)`` with the efficiency constraint enforced.

    ``mode="exact"`` (the ``"auto"`` choice for up to 12 features) uses every
    non-trivial coalition with its kernel weight, which recovers the exact
    Shapley values; ``mode="sample"`` draws ``n_samples`` coalitions.
    """
    n = background.n_features
    if mode == "auto":
        mode = "exact" if n <= EXACT_MODE_LIMIT else "sample"
    if mode == "exact":
        if n > MAX_EXACT_FEATURES:
            raise ExplainError(f"exact mode over {n} features is too large")
        masks = all_masks(n)[1:-1]
        sizes = masks.sum(axis=1)
        w = np.array([shapley_kernel_weight(n, int(k)) for k in sizes])
    elif mode == "sample":
        if n_samples is None or n_samples < n + 2:
            raise ExplainError("sampling mode needs n_samples >= n_features + 2")
        masks, w = _sample_masks(n, n_samples, rng if rng is not None else np.random.default_rng(0))
    else:
        raise ExplainError(f"unknown mode {mode!r}")
    ends = np.vstack([np.zeros(n, dtype=bool), np.ones(n, dtype=bool)])
    v_ends = coalition_values(model_fn, x, background, ends)
    phi0, fx = v_ends[0], v_ends[1]
    if n == 1:
        phi = (fx - phi0)[None, :]
    else:
        v = coalition_values(model_fn, x, background, masks)
        phi = _constrained_wls(masks.astype(np.float64), v - phi0[None, :], w, fx - phi0)
    return _select(phi, action_index), _select(phi0, action_index)


# ---------------------------------------------------------------------------
# Policy explanations
# ---------------------------------------------------------------------------


@dataclass
class Attribution:
    """Shapley values of every action output at one decision state.

    ``phi`` has shape ``(n_features, n_actions)``; ``x`` is the scaled
    observation the policy saw and ``raw`` the unscaled one.
    """

    phi: np.ndarray
    phi0: np.ndarray
    output: np.ndarray
    x: np.ndarray
    raw: np.ndarray
    patient_id: str = ""
    year: int = 0
    fold: int | None = None
    seed: int | None = None
    agent: str = ""

    def efficiency_gap(self) -> float:
        return float(np.max(np.abs(self.phi0 + self.phi.sum(axis=0) - self.output)))


@dataclass
class GlobalAttribution:
    sum_phi: np.ndarray
    mean_abs_phi: np.ndarray
    count: int
    feature_names: list[str] = field(default_factory=list)
    action_names: list[str] = field(default_factory=list)

    @property
    def importance(self) -> np.ndarray:
        """Per-feature ranking score: mean |phi| summed over actions."""
        return self.mean_abs_phi.sum(axis=1)

    def ranking(self) -> list[tuple[str, float]]:
        score = self.importance
        names = self.feature_names or [f"f{i}" for i in range(len(score))]
        order = sorted(range(len(score)), key=lambda i: (-score[i], i))
        return [(names[i], float(score[i])) for i in order]


def policy_states(snapshot: PolicySnapshot, patients: Sequence, params: Sequence[ModelParams],
                  graph: BrainGraph, config: EnvConfig | None = None) -> np.ndarray:
    """Unscaled decision states visited by the deterministic policy, ``(n * horizon, n_features)``."""
    state = brainsim.reset_batch(patients, graph, config)
    traj = brainsim.simulate(state, lambda s: snapshot.act(snapshot.scale(s.features())),
                             ModelParams.stack(params), graph, config)
    feats = np.concatenate([traj["size"], traj["amyloid"], traj["info"]], axis=-1)[:, :-1]
    return feats.reshape(-1, feats.shape[-1])


def policy_background(snapshot: PolicySnapshot, patients: Sequence, params: Sequence[ModelParams],
                      graph: BrainGraph, config: EnvConfig | None = None,
                      max_rows: int = MAX_BACKGROUND_ROWS,
                      rng: np.random.Generator | None = None) -> BackgroundSet:
    """Background of scaled training-set states visited by the policy."""
    states = policy_states(snapshot, patients, params, graph, config)
    return BackgroundSet.sample(snapshot.scale(states), max_rows, rng)


def explain_trajectory(snapshot: PolicySnapshot, patient, params: ModelParams, graph: BrainGraph,
                       background: BackgroundSet, config: EnvConfig | None = None,
                       fold: int | None = None, seed: int | None = None) -> list[Attribution]:
    """One attribution per action step of the deterministic policy rollout."""
    config = config or EnvConfig()
    state = brainsim.env_reset(patient, params, graph, config)
    out = []
    while state.year < config.horizon:
        raw = state.features()
        x = snapshot.scale(raw)
        phi, phi0 = kernel_shap(snapshot.act, x, background, mode="exact")
        action = snapshot.act(x)
        out.append(Attribution(phi, phi0, action, x, raw, str(patient.patient_id), state.year, fold,
                               seed, snapshot.kind))
        step = brainsim.env_step(state, action, params, graph, config)
        if step.degenerate:
            break
        state = step.next_state
    return out


def aggregate_global(attributions: Sequence[Attribution], feature_names: Sequence[str] = (),
                     action_names: Sequence[str] = ()) -> GlobalAttribution:
    """Sum of local attributions (accumulated in list order) and mean |phi| per entry.

    The mean |phi| uses exactly rounded sums, so the ranking does not depend
    on the order of ``attributions``.
    """
    if not attributions:
        raise ExplainError("no attributions to aggregate")
    shape = attributions[0].phi.shape
    if any(a.phi.shape != shape for a in attributions):
        raise ExplainError("attributions have inconsistent dimensions")
    total = np.zeros(shape)
    for a in attributions:
        total = total + a.phi
    abs_stack = np.abs(np.stack([a.phi for a in attributions]))
    mean_abs = np.array([[math.fsum(abs_stack[:, i, j]) for j in range(shape[1])]
                         for i in range(shape[0])]) / len(attributions)
    return GlobalAttribution(total, mean_abs, len(attributions), list(feature_names), list(action_names))


def export_attributions(attributions: Iterable[Attribution], path: str | Path,
                        feature_names: Sequence[str], action_names: Sequence[str]) -> Path:
    """Long-format CSV with one row per (state, action, feature).

    Rows sort by patient id, year, action position and feature position.
    Floats are written with ``repr`` so reading them back is bit-exact.
    """
    rows = []
    for a in attributions:
        n_feat, n_act = a.phi.shape
        if n_feat != len(feature_names) or n_act != len(action_names):
            raise ExplainError("name lists do not match the attribution shape")
        for j in range(n_act):
            for i in range(n_feat):
                rows.append(((a.patient_id, a.year, j, i), [
                    a.patient_id, a.year, "" if a.fold is None else a.fold, "" if a.seed is None else a.seed,
                    a.agent, action_names[j], feature_names[i], repr(float(a.raw[i])),
                    repr(float(a.x[i])), repr(float(a.phi[i, j])), repr(float(a.phi0[j])),
                    repr(float(a.output[j])),
                ]))
    rows.sort(key=lambda r: r[0])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ATTRIBUTION_COLUMNS)
        writer.writerows(r[1] for r in rows)
    return path


def read_attributions(path: str | Path) -> tuple[list[Attribution], list[str], list[str]]:
    """Inverse of :func:`export_attributions`: ``(attributions, feature_names, action_names)``."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ATTRIBUTION_COLUMNS:
            raise ExplainError(f"{path}: unexpected attribution header {reader.fieldnames}")
        records = list(reader)
    features, actions = [], []
    groups: dict[tuple[str, int, str, str, str], list[dict]] = {}
    for r in records:
        if r["feature_name"] not in features:
            features.append(r["feature_name"])
        if r["action_name"] not in actions:
            actions.append(r["action_name"])
        key = (r["patient_id"], int(r["year"]), r["fold"], r["seed"], r["agent"])
        groups.setdefault(key, []).append(r)
    out = []
    for (pid, year, fold, seed, agent), rs in groups.items():
        phi = np.zeros((len(features), len(actions)))
        phi0, output = np.zeros(len(actions)), np.zeros(len(actions))
        raw, x = np.zeros(len(features)), np.zeros(len(features))
        for r in rs:
            i, j = features.index(r["feature_name"]), actions.index(r["action_name"])
            phi[i, j] = float(r["phi"])
            phi0[j], output[j] = float(r["phi0"]), float(r["output"])
            raw[i], x[i] = float(r["feature_value"]), float(r["scaled_value"])
        out.append(Attribution(phi, phi0, output, x, raw, pid, year, int(fold) if fold else None,
                               int(seed) if seed else None, agent))
    return out, features, actions
