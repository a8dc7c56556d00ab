"""Patient cohorts: tabular ingestion, synthetic generation, score scales, folds.

Cohort CSV layout (header required, UTF-8, comma-separated)::

    patient_id,age,gender,education,apoe4,score_kind,x_hc,x_pfc,d_hc,d_pfc,
    alpha1,alpha2,beta,gamma,score_y0,...,score_y10

``alpha1..gamma`` may be blank (parameters then come from the demographic
map); score cells are blank where a visit was not observed. An optional
``diagnosis`` column is carried through untouched.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import brainsim
from .brainsim import BrainGraph, EnvConfig, ModelParams

log = logging.getLogger(__name__)

N_YEARS = 10
SCORE_MAX = {"MMSE": 30.0, "ADAS13": 85.0}
PARAM_COLUMNS = ("alpha1", "alpha2", "beta", "gamma")
BASE_COLUMNS = ("patient_id", "age", "gender", "education", "apoe4", "score_kind",
                "x_hc", "x_pfc", "d_hc", "d_pfc")
SCORE_COLUMNS = tuple(f"score_y{t}" for t in range(N_YEARS + 1))
CSV_COLUMNS = BASE_COLUMNS + PARAM_COLUMNS + SCORE_COLUMNS


class CohortError(ValueError):
    """Invalid cohort data; ``diagnostics`` lists row-level problems."""

    def __init__(self, message: str, diagnostics: Sequence[str] = ()):
        self.diagnostics = list(diagnostics)
        if self.diagnostics:
            message = message + "\n" + "\n".join(f"  {d}" for d in self.diagnostics)
        super().__init__(message)


# ---------------------------------------------------------------------------
# Score scales
# ---------------------------------------------------------------------------


def _check_kind(kind: str) -> str:
    kind = kind.upper()
    if kind not in SCORE_MAX:
        raise CohortError(f"unknown score kind {kind!r}; expected MMSE or ADAS13")
    return kind


def normalize_score(raw: float, kind: str) -> float:
    """Map a raw test score onto the 0-10 ability scale.

    MMSE (0-30, higher is better) is divided by 3. ADAS13 (0-85, higher is
    worse) is inverted: ``10 * (1 - raw / 85)``.
    """
    kind = _check_kind(kind)
    top = SCORE_MAX[kind]
    if not 0.0 <= raw <= top:
        raise CohortError(f"{kind} score {raw} outside [0, {top:g}]")
    if kind == "MMSE":
        return raw / 3.0
    return 10.0 * (1.0 - raw / top)


def denormalize_score(value, kind: str):
    """Inverse of :func:`normalize_score`; accepts scalars or arrays."""
    kind = _check_kind(kind)
    if kind == "MMSE":
        return np.asarray(value, dtype=np.float64) * 3.0 if np.ndim(value) else value * 3.0
    top = SCORE_MAX[kind]
    if np.ndim(value):
        return (1.0 - np.asarray(value, dtype=np.float64) / 10.0) * top
    return (1.0 - value / 10.0) * top


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Demographics:
    age: float
    gender: str
    education: float
    apoe4: bool

    def __post_init__(self) -> None:
        if self.gender not in ("M", "F"):
            raise CohortError(f"gender must be M or F, got {self.gender!r}")


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    demographics: Demographics
    baseline_size: tuple[float, ...]
    baseline_amyloid: tuple[float, ...]
    scores: tuple[float | None, ...]
    score_kind: str = "MMSE"
    params_override: ModelParams | None = None
    diagnosis: str = ""

    def __post_init__(self) -> None:
        kind = _check_kind(self.score_kind)
        object.__setattr__(self, "score_kind", kind)
        object.__setattr__(self, "baseline_size", tuple(float(v) for v in self.baseline_size))
        object.__setattr__(self, "baseline_amyloid", tuple(float(v) for v in self.baseline_amyloid))
        scores = tuple(None if s is None or (isinstance(s, float) and math.isnan(s)) else float(s)
                       for s in self.scores)
        if len(scores) != N_YEARS + 1:
            raise CohortError(f"{self.patient_id}: expected {N_YEARS + 1} score slots, got {len(scores)}")
        object.__setattr__(self, "scores", scores)
        if scores[0] is None:
            raise CohortError(f"{self.patient_id}: missing year-0 score")
        if sum(s is not None for s in scores[1:]) < 2:
            raise CohortError(f"{self.patient_id}: fewer than 2 follow-ups")
        top = SCORE_MAX[kind]
        for t, s in enumerate(scores):
            if s is not None and not 0.0 <= s <= top:
                raise CohortError(f"{self.patient_id}: year {t} {kind} score {s} outside [0, {top:g}]")
        if any(v <= 0 for v in self.baseline_size):
            raise CohortError(f"{self.patient_id}: baseline sizes must be > 0")

    @property
    def baseline_cognition(self) -> float:
        return normalize_score(self.scores[0], self.score_kind)

    def normalized_scores(self) -> np.ndarray:
        """Scores on the 0-10 scale, NaN where unobserved."""
        return np.array([np.nan if s is None else normalize_score(s, self.score_kind)
                         for s in self.scores])


@dataclass(frozen=True)
class Cohort:
    records: tuple[PatientRecord, ...]
    score_kind: str = "MMSE"
    rejected: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        if not records:
            raise CohortError("cohort is empty")
        seen: set[str] = set()
        for r in records:
            if r.patient_id in seen:
                raise CohortError(f"duplicate patient_id {r.patient_id!r}")
            seen.add(r.patient_id)
        kinds = {r.score_kind for r in records}
        if kinds != {_check_kind(self.score_kind)}:
            raise CohortError(f"mixed or mismatched score kinds {sorted(kinds)}")
        object.__setattr__(self, "score_kind", _check_kind(self.score_kind))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[PatientRecord]:
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    def get(self, patient_id: str) -> PatientRecord:
        for r in self.records:
            if r.patient_id == patient_id:
                return r
        raise KeyError(patient_id)

    def subset(self, ids: Iterable[str]) -> list[PatientRecord]:
        index = {r.patient_id: r for r in self.records}
        return [index[i] for i in ids]


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def _parse_float(text: str, column: str) -> float | None:
    text = text.strip()
    if text == "":
        return None
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"column {column!r}: non-numeric value {text!r}") from None
    if not math.isfinite(value):
        raise ValueError(f"column {column!r}: non-finite value {text!r}")
    return value


def _parse_row(row: Mapping[str, str]) -> PatientRecord:
    def required(col: str) -> float:
        value = _parse_float(row[col], col)
        if value is None:
            raise ValueError(f"column {col!r} is blank")
        return value

    apoe = row["apoe4"].strip()
    if apoe not in ("0", "1"):
        raise ValueError(f"column 'apoe4' must be 0 or 1, got {apoe!r}")
    demo = Demographics(required("age"), row["gender"].strip(), required("education"), apoe == "1")
    params = [_parse_float(row[c], c) for c in PARAM_COLUMNS]
    if all(p is None for p in params):
        override = None
    elif any(p is None for p in params):
        raise ValueError("parameter columns must be all filled or all blank")
    else:
        override = ModelParams(alpha1=params[0], alpha2=params[1], beta=params[2], gamma_act=params[3])
    return PatientRecord(
        patient_id=row["patient_id"].strip(),
        demographics=demo,
        baseline_size=(required("x_hc"), required("x_pfc")),
        baseline_amyloid=(required("d_hc"), required("d_pfc")),
        scores=tuple(_parse_float(row[c], c) for c in SCORE_COLUMNS),
        score_kind=row["score_kind"].strip(),
        params_override=override,
        diagnosis=(row.get("diagnosis") or "").strip(),
    )


def load_cohort(path: str | Path, strict: bool = True) -> Cohort:
    """Read and validate a cohort CSV.

    With ``strict=True`` any invalid row raises :class:`CohortError` listing
    every row-level problem; otherwise invalid rows are dropped and reported
    in ``Cohort.rejected``. Duplicate ids and header problems always raise.
    """
    path = Path(path)
    if not path.exists():
        raise CohortError(f"cohort file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise CohortError(f"malformed header in {path}: missing columns {missing}")
        records: list[PatientRecord] = []
        problems: list[str] = []
        seen: dict[str, int] = {}
        for lineno, row in enumerate(reader, start=2):
            pid = (row.get("patient_id") or "").strip()
            if pid in seen:
                raise CohortError(f"duplicate patient_id {pid!r} (rows {seen[pid]} and {lineno})")
            seen[pid] = lineno
            try:
                records.append(_parse_row(row))
            except (ValueError, TypeError) as exc:
                problems.append(f"row {lineno} ({pid or '?'}): {exc}")
    if problems and strict:
        raise CohortError(f"{len(problems)} invalid row(s) in {path}", problems)
    for p in problems:
        log.warning("rejected %s", p)
    if not records:
        raise CohortError(f"no valid rows in {path}", problems)
    kinds = {r.score_kind for r in records}
    if len(kinds) != 1:
        raise CohortError(f"mixed score kinds in {path}: {sorted(kinds)}")
    return Cohort(tuple(records), kinds.pop(), tuple(problems))


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def save_cohort(cohort: Cohort, path: str | Path) -> Path:
    """Write ``cohort`` in the CSV layout above; floats round-trip exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS + ("diagnosis",))
        for r in cohort:
            d = r.demographics
            p = r.params_override
            params = ([p.alpha1, p.alpha2, p.beta, p.gamma_act] if p is not None else [None] * 4)
            writer.writerow(
                [r.patient_id, _fmt(d.age), d.gender, _fmt(d.education), "1" if d.apoe4 else "0",
                 r.score_kind, *map(_fmt, r.baseline_size), *map(_fmt, r.baseline_amyloid),
                 *map(_fmt, params), *map(_fmt, r.scores), r.diagnosis]
            )
    return path


# ---------------------------------------------------------------------------
# Demographics -> parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamMap:
    """Affine map from demographics to the four rate constants.

    Continuous features (age, education) are standardized with the stored
    centers/scales; gender (F=1) and APOE4 carrier status enter as 0/1.
    ``coefficients[param][feature]`` is the slope; outputs clamp at 0.
    This is a configurable stand-in, not a fitted regression.
    """

    intercepts: Mapping[str, float] = field(default_factory=lambda: {
        "alpha1": 0.05, "alpha2": 0.02, "beta": 0.1, "gamma_act": 2.0})
    coefficients: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    centers: Mapping[str, float] = field(default_factory=lambda: {"age": 73.0, "education": 16.0})
    scales: Mapping[str, float] = field(default_factory=lambda: {"age": 7.0, "education": 3.0})
    lambda_tradeoff: float = 1.0
    c_task: float = 10.0

    def features(self, z0: Demographics) -> dict[str, float]:
        return {
            "age": (z0.age - self.centers["age"]) / self.scales["age"],
            "education": (z0.education - self.centers["education"]) / self.scales["education"],
            "gender": 1.0 if z0.gender == "F" else 0.0,
            "apoe4": 1.0 if z0.apoe4 else 0.0,
        }


def demographic_params(z0: Demographics, param_map: ParamMap,
                       override: ModelParams | None = None) -> ModelParams:
    if override is not None:
        return override
    feats = param_map.features(z0)
    values = {}
    for name in ("alpha1", "alpha2", "beta", "gamma_act"):
        coefs = param_map.coefficients.get(name, {})
        v = param_map.intercepts[name] + sum(coefs.get(k, 0.0) * x for k, x in feats.items())
        values[name] = max(v, 0.0)
    return ModelParams(**values, lambda_tradeoff=param_map.lambda_tradeoff, c_task=param_map.c_task)


def patient_params(patient: PatientRecord, param_map: ParamMap | None = None) -> ModelParams:
    """Parameters for one patient: the embedded override wins, else the map.

    Overrides only carry the four rate constants, so the trade-off weight and
    demand ceiling always come from ``param_map``.
    """
    param_map = param_map or ParamMap()
    if patient.params_override is not None:
        return replace(patient.params_override, lambda_tradeoff=param_map.lambda_tradeoff,
                       c_task=param_map.c_task)
    return demographic_params(patient.demographics, param_map)


# ---------------------------------------------------------------------------
# Synthetic cohorts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Sampling ranges for a synthetic cohort (uniform unless noted)."""

    n_patients: int = 160
    score_kind: str = "MMSE"
    size_range: tuple[float, float] = (1.0, 8.0)
    amyloid_range: tuple[float, float] = (0.8, 2.5)
    cognition_range: tuple[float, float] = (6.0, 10.0)
    alpha1_range: tuple[float, float] = (0.04, 0.12)
    alpha2_range: tuple[float, float] = (0.02, 0.04)
    beta_range: tuple[float, float] = (0.05, 0.2)
    gamma_range: tuple[float, float] = (2.5, 3.0)
    age_range: tuple[float, float] = (55.0, 90.0)
    education_range: tuple[float, float] = (8.0, 20.0)
    apoe4_prob: float = 0.4
    noise_sd: float = 0.1
    lambda_tradeoff: float = 1.0
    c_task: float = 10.0

    def __post_init__(self) -> None:
        if self.n_patients < 1:
            raise CohortError("n_patients must be >= 1")
        for name in ("size_range", "amyloid_range", "cognition_range", "alpha1_range",
                     "alpha2_range", "beta_range", "gamma_range", "age_range", "education_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise CohortError(f"{name}: invalid range ({lo}, {hi})")
        if self.size_range[0] <= 0:
            raise CohortError("size_range must be positive")
        for name in ("amyloid_range", "alpha1_range", "alpha2_range", "beta_range", "gamma_range"):
            if getattr(self, name)[0] < 0:
                raise CohortError(f"{name} must be nonnegative")
        if not (0 <= self.cognition_range[0] and self.cognition_range[1] <= self.c_task):
            raise CohortError("cognition_range must lie within [0, c_task]")
        if self.noise_sd < 0 or not 0 <= self.apoe4_prob <= 1:
            raise CohortError("noise_sd must be >= 0 and apoe4_prob in [0, 1]")
        _check_kind(self.score_kind)

    @property
    def param_map(self) -> ParamMap:
        return ParamMap(lambda_tradeoff=self.lambda_tradeoff, c_task=self.c_task)


@dataclass(frozen=True)
class SyntheticCohort:
    """A generated cohort plus its noiseless normalized trajectories."""

    cohort: Cohort
    clean: np.ndarray  # (n_patients, 11), normalized scale


def simulate_cost_efficient(patients: Sequence[PatientRecord], params: ModelParams,
                            graph: BrainGraph, config: EnvConfig | None = None) -> np.ndarray:
    """Cognition trajectories (n, horizon+1) under :func:`brainsim.cost_efficient_action`."""
    state = brainsim.reset_batch(patients, graph, config)
    limit = (config or EnvConfig()).action_limit
    traj = brainsim.simulate(
        state, lambda st: brainsim.cost_efficient_action(st, params, limit), params, graph, config)
    return traj["cognition"]


def generate_synthetic_cohort(spec: SynthSpec, seed: int, graph: BrainGraph | None = None,
                              config: EnvConfig | None = None) -> SyntheticCohort:
    """Sample baselines and rate constants, then roll the dynamics forward.

    Sizes are resampled until at least one region can support cognition at a
    positive marginal reward at baseline. Ground truth follows
    :func:`brainsim.cost_efficient_action`; Gaussian noise of ``noise_sd``
    (0-10 scale) is added to follow-up scores only. True constants are
    stored as ``params_override``.
    """
    graph = graph or BrainGraph.two_region()
    config = config or EnvConfig()
    if config.horizon != N_YEARS:
        raise CohortError(f"synthetic cohorts need a {N_YEARS}-step horizon")
    rng = np.random.default_rng(seed)
    n, v = spec.n_patients, graph.n_regions
    u = lambda r, size=None: rng.uniform(r[0], r[1], size)  # noqa: E731

    alpha1, alpha2 = u(spec.alpha1_range, n), u(spec.alpha2_range, n)
    beta, gamma = u(spec.beta_range, n), u(spec.gamma_range, n)
    sizes = u(spec.size_range, (n, v))
    for _ in range(1000):
        bad = sizes.max(axis=1) * spec.lambda_tradeoff <= gamma
        if not bad.any():
            break
        sizes[bad] = u(spec.size_range, (int(bad.sum()), v))
    else:
        raise CohortError("size_range cannot support gamma_range at baseline")
    amyloid = u(spec.amyloid_range, (n, v))
    cog0 = u(spec.cognition_range, n)
    ages, edu = u(spec.age_range, n), u(spec.education_range, n)
    genders = rng.random(n) < 0.5
    apoe = rng.random(n) < spec.apoe4_prob

    kind = spec.score_kind
    cog0_raw = np.array([denormalize_score(float(c), kind) for c in cog0])
    cog0 = np.array([normalize_score(float(c), kind) for c in cog0_raw])
    provisional = []
    overrides = []
    for i in range(n):
        overrides.append(ModelParams(alpha1=alpha1[i], alpha2=alpha2[i], beta=beta[i], gamma_act=gamma[i],
                                     lambda_tradeoff=spec.lambda_tradeoff, c_task=spec.c_task))
        provisional.append(PatientRecord(
            patient_id=f"S{i:04d}",
            demographics=Demographics(round(float(ages[i]), 1), "F" if genders[i] else "M",
                                      float(round(edu[i])), bool(apoe[i])),
            baseline_size=tuple(sizes[i]),
            baseline_amyloid=tuple(amyloid[i]),
            scores=(float(cog0_raw[i]),) + (0.0,) * N_YEARS,
            score_kind=kind,
            params_override=overrides[i],
        ))
    clean = simulate_cost_efficient(provisional, ModelParams.stack(overrides), graph, config)
    noisy = clean.copy()
    noisy[:, 1:] += rng.normal(0.0, spec.noise_sd, (n, N_YEARS)) if spec.noise_sd > 0 else 0.0
    noisy = np.clip(noisy, 0.0, 10.0)
    records = []
    for i, rec in enumerate(provisional):
        raw = [float(cog0_raw[i])] + [float(denormalize_score(float(c), kind)) for c in noisy[i, 1:]]
        raw = [min(max(s, 0.0), SCORE_MAX[kind]) for s in raw]
        records.append(replace(rec, scores=tuple(raw)))
    return SyntheticCohort(Cohort(tuple(records), kind), clean)


# ---------------------------------------------------------------------------
# Folds and observation scaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]


def kfold_split(cohort: Cohort, k: int = 5, seed: int = 0,
                validation_fraction: float = 0.2) -> list[FoldSplit]:
    """Shuffled k-fold test blocks; the rest of each fold splits 80/20 train/validation.

    With the defaults this gives the 64:16:20 train/validation/test ratio.
    """
    if k < 2:
        raise CohortError("k must be >= 2")
    ids = np.array(cohort.ids)
    if len(ids) < k:
        raise CohortError(f"cohort of {len(ids)} is smaller than k={k}")
    perm = np.random.default_rng(seed).permutation(ids)
    blocks = np.array_split(perm, k)
    folds = []
    for i in range(k):
        rest = np.concatenate([b for j, b in enumerate(blocks) if j != i])
        rest = np.random.default_rng([seed, i]).permutation(rest)
        n_val = int(round(len(rest) * validation_fraction))
        folds.append(FoldSplit(i, tuple(rest[n_val:].tolist()), tuple(rest[:n_val].tolist()),
                               tuple(blocks[i].tolist())))
    return folds


@dataclass(frozen=True)
class ObservationScaler:
    """Per-feature min-max bounds mapping the fitted range into [0, 1].

    Values outside the bounds are not clamped: states later in an episode
    routinely leave the baseline range and the policy still needs to tell
    them apart.
    """

    low: np.ndarray | None = None
    high: np.ndarray | None = None

    def __post_init__(self) -> None:
        if (self.low is None) != (self.high is None):
            raise ValueError("low and high must both be set")
        if self.low is not None:
            low = np.array(self.low, dtype=np.float64)
            high = np.array(self.high, dtype=np.float64)
            if low.shape != high.shape or np.any(high <= low):
                raise ValueError("scaler bounds need high > low per feature")
            object.__setattr__(self, "low", low)
            object.__setattr__(self, "high", high)

    @property
    def fitted(self) -> bool:
        return self.low is not None

    def transform(self, x) -> np.ndarray:
        if not self.fitted:
            raise ValueError("observation scaler is not fitted")
        return (np.asarray(x, dtype=np.float64) - self.low) / (self.high - self.low)

    def inverse_transform(self, z) -> np.ndarray:
        if not self.fitted:
            raise ValueError("observation scaler is not fitted")
        return self.low + np.asarray(z, dtype=np.float64) * (self.high - self.low)


def fit_scaler(patients: Iterable[PatientRecord], graph: BrainGraph | None = None,
               config: EnvConfig | None = None, margin: float = 0.05) -> ObservationScaler:
    """Min-max bounds over baseline observations, widened by ``margin`` of the range.

    A constant feature gets bounds of +-0.5 around its value.
    """
    graph = graph or BrainGraph.two_region()
    patients = list(patients)
    if not patients:
        raise CohortError("cannot fit a scaler on no patients")
    feats = brainsim.reset_batch(patients, graph, config).features()
    lo, hi = feats.min(axis=0), feats.max(axis=0)
    span = hi - lo
    const = span <= 0
    low = np.where(const, lo - 0.5, lo - margin * span)
    high = np.where(const, hi + 0.5, hi + margin * span)
    return ObservationScaler(low, high)
