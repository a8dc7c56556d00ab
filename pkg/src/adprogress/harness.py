"""Cross-validated training, trajectory prediction, scoring and reporting."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import explain
from .agents import AgentConfig, predict_cognition, train
from .brainsim import BrainGraph, EnvConfig, ModelParams
from .cohort import (Cohort, ParamMap, PatientRecord, SynthSpec, denormalize_score, fit_scaler,
                     generate_synthetic_cohort, kfold_split, load_cohort, patient_params)
from .neural import PolicySnapshot, load_snapshot, save_snapshot

log = logging.getLogger(__name__)

EXPLAIN_SCOPES = ("test", "cohort", "patient", "none")


class ExperimentError(RuntimeError):
    pass


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Independent generator for a named component of an experiment."""
    key = [int(seed)] + [zlib.crc32(n.encode()) if isinstance(n, str) else int(n) for n in names]
    return np.random.default_rng(key)


def _int_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(2**31))


# ---------------------------------------------------------------------------
# Prediction and scoring
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryPrediction:
    patient_id: str
    cognition: np.ndarray
    raw: np.ndarray
    info: np.ndarray
    size: np.ndarray
    amyloid: np.ndarray
    activity: np.ndarray
    degenerate: bool = False


def rollout_predictions(snapshot: PolicySnapshot, patients: Sequence[PatientRecord],
                        params: Sequence[ModelParams], graph: BrainGraph,
                        config: EnvConfig | None = None) -> list[TrajectoryPrediction]:
    """Batched :func:`rollout_prediction`."""
    if not patients:
        return []
    traj = predict_cognition(snapshot, patients, params, graph, config)
    out = []
    for i, p in enumerate(patients):
        cog = traj["cognition"][i].copy()
        cog[0] = p.baseline_cognition  # regional split re-summed can differ in the last bit
        out.append(TrajectoryPrediction(
            str(p.patient_id), cog, denormalize_score(np.clip(cog, 0.0, 10.0), p.score_kind),
            traj["info"][i], traj["size"][i], traj["amyloid"][i], traj["activity"][i],
            bool(traj["degenerate"][i]),
        ))
    return out


def rollout_prediction(snapshot: PolicySnapshot, patient: PatientRecord, params: ModelParams,
                       graph: BrainGraph, config: EnvConfig | None = None) -> TrajectoryPrediction:
    """Deterministic 10-year cognition trajectory from the patient's baseline.

    A degenerate episode keeps its last valid values and is flagged.
    """
    return rollout_predictions(snapshot, [patient], [params], graph, config)[0]


def _errors(predictions: Sequence[TrajectoryPrediction], cohort: Cohort | Sequence[PatientRecord],
            raw: bool = False) -> np.ndarray:
    lookup = {str(p.patient_id): p for p in cohort}
    errs = []
    for pred in predictions:
        rec = lookup.get(pred.patient_id)
        if rec is None:
            continue
        if raw:
            truth = np.array([np.nan if s is None else s for s in rec.scores], dtype=np.float64)
            guess = pred.raw
        else:
            truth, guess = rec.normalized_scores(), pred.cognition
        seen = ~np.isnan(truth)
        seen[0] = False  # the baseline is an input, not a prediction
        errs.append(guess[seen] - truth[seen])
    if not errs or not sum(len(e) for e in errs):
        raise ExperimentError("predictions share no observed follow-up scores with the cohort")
    return np.concatenate(errs)


def score(predictions: Sequence[TrajectoryPrediction], cohort: Cohort | Sequence[PatientRecord],
          raw: bool = False) -> tuple[float, float]:
    """``(MAE, MSE)`` over observed follow-up years on the normalized scale (raw scale if asked)."""
    e = _errors(predictions, cohort, raw)
    return float(np.mean(np.abs(e))), float(np.mean(e ** 2))


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one cross-validated experiment.

    Exactly one of ``cohort_path`` and ``synth`` selects the cohort.
    ``epochs`` and ``batch_size`` override every agent's values when set;
    ``folds`` restricts which folds are run (all by default).
    """

    cohort_path: str | None = None
    synth: SynthSpec | None = field(default_factory=SynthSpec)
    cohort_seed: int = 0
    score_kind: str = "MMSE"
    adjacency: list[list[float]] = field(default_factory=lambda: [[0.0, 1.0], [1.0, 0.0]])
    region_names: list[str] = field(default_factory=lambda: ["HC", "PFC"])
    param_map: ParamMap = field(default_factory=ParamMap)
    env: EnvConfig = field(default_factory=EnvConfig)
    agents: list[str] = field(default_factory=lambda: ["TRPO", "PPO", "DDPG", "SAC"])
    agent_overrides: dict[str, dict[str, Any]] = field(default_factory=dict)
    k: int = 5
    seeds: int = 5
    folds: list[int] | None = None
    epochs: int | None = None
    batch_size: int | None = None
    out_dir: str = "runs_out"
    explain_scope: str = "test"
    explain_patient: str | None = None
    background_rows: int = explain.MAX_BACKGROUND_ROWS
    workers: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        self.agents = [a.upper() for a in self.agents]
        problems = self.problems(check_paths=False)
        if problems:
            raise ExperimentError("invalid experiment config:\n  " + "\n  ".join(problems))

    def problems(self, check_paths: bool = True) -> list[str]:
        """All validation failures at once (empty when valid)."""
        out = []
        if (self.cohort_path is None) == (self.synth is None):
            out.append("exactly one of cohort_path and synth must be set")
        if check_paths and self.cohort_path is not None and not Path(self.cohort_path).is_file():
            out.append(f"cohort file not found: {self.cohort_path}")
        if self.k < 2:
            out.append("k must be >= 2")
        if self.seeds < 1:
            out.append("seeds must be >= 1")
        if self.workers < 1:
            out.append("workers must be >= 1")
        if self.explain_scope not in EXPLAIN_SCOPES:
            out.append(f"explain_scope must be one of {EXPLAIN_SCOPES}")
        if self.explain_scope == "patient" and not self.explain_patient:
            out.append("explain_scope 'patient' needs explain_patient")
        if self.folds is not None and any(not 0 <= f < self.k for f in self.folds):
            out.append(f"folds must lie in 0..{self.k - 1}")
        if not self.agents:
            out.append("at least one agent is required")
        for a in self.agents:
            try:
                self.agent_config(a)
            except (ValueError, TypeError) as exc:
                out.append(f"agent {a}: {exc}")
        return out

    def graph(self) -> BrainGraph:
        return BrainGraph(np.array(self.adjacency, dtype=np.float64), tuple(self.region_names))

    def agent_config(self, kind: str, seed: int = 0) -> AgentConfig:
        over = dict(self.agent_overrides.get(kind.upper(), {}))
        if self.epochs is not None:
            over["total_epochs"] = self.epochs
        if self.batch_size is not None:
            over["batch_size"] = self.batch_size
        over.setdefault("kind", kind)
        return AgentConfig(**{**over, "seed": seed})

    def load(self) -> Cohort:
        if self.cohort_path is not None:
            return load_cohort(self.cohort_path)
        spec = self.synth if self.synth.score_kind == self.score_kind else replace(self.synth, score_kind=self.score_kind)
        return generate_synthetic_cohort(spec, self.cohort_seed, self.graph(), self.env).cohort


def cohort_fingerprint(cohort: Cohort) -> str:
    h = hashlib.sha256()
    for r in cohort:
        h.update(repr((r.patient_id, r.scores, r.score_kind)).encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    agent: str
    fold: int
    seed: int
    status: str
    mae: float = math.nan
    mse: float = math.nan
    mae_raw: float = math.nan
    mse_raw: float = math.nan
    n_test: int = 0
    best_epoch: int = 0
    run_dir: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class ExperimentResult:
    runs: list[RunResult]
    summary: list[dict]
    score_kind: str
    out_dir: Path
    cohort_id: str

    @property
    def complete(self) -> bool:
        return all(r.ok for r in self.runs)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([[_fmt(v) for v in row] for row in rows])
    return path


def read_rows(path: Path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _write_trajectories(path: Path, preds: Sequence[TrajectoryPrediction], cohort: Cohort,
                        regions: Sequence[str]) -> None:
    header = ["patient_id", "year", "predicted", "predicted_raw", "observed", "degenerate"]
    for pre in ("I", "X", "D", "Y"):
        header += [f"{pre}_{r}" for r in regions]
    rows = []
    for p in preds:
        obs = cohort.get(p.patient_id).normalized_scores()
        for t in range(len(p.cognition)):
            act = p.activity[t] if t < len(p.activity) else np.full(len(regions), np.nan)
            rows.append([p.patient_id, t, p.cognition[t], p.raw[t], obs[t], int(p.degenerate),
                         *p.info[t], *p.size[t], *p.amyloid[t], *act])
    write_rows(path, header, rows)


@dataclass
class _Job:
    config: ExperimentConfig
    cohort: Cohort
    agent: str
    fold: Any
    seed_index: int


def _explain_patients(cfg: ExperimentConfig, cohort: Cohort, test: list[PatientRecord]) -> list[PatientRecord]:
    if cfg.explain_scope == "test":
        return test
    if cfg.explain_scope == "cohort":
        return list(cohort)
    if cfg.explain_scope == "patient":
        return [r for r in test if r.patient_id == cfg.explain_patient]
    return []


def _explain_run(cfg: ExperimentConfig, cohort: Cohort, fold, seed_index: int, snapshot: PolicySnapshot,
                 run_dir: Path) -> Path | None:
    """Attributions for one trained run over the configured scope, written to ``run_dir``."""
    graph = cfg.graph()
    test_p = cohort.subset(fold.test)
    targets = _explain_patients(cfg, cohort, test_p)
    path = run_dir / "attributions.csv"
    if not targets:
        path.unlink(missing_ok=True)
        return None
    train_p = cohort.subset(fold.train)
    bg = explain.policy_background(
        snapshot, train_p, [patient_params(p, cfg.param_map) for p in train_p], graph, cfg.env,
        cfg.background_rows, substream(cfg.seed, "background", snapshot.kind, fold.fold_index, seed_index))
    attrs = []
    for p in targets:
        attrs += explain.explain_trajectory(snapshot, p, patient_params(p, cfg.param_map), graph, bg, cfg.env,
                                            fold.fold_index, seed_index)
    return explain.export_attributions(attrs, path, graph.feature_names(), graph.action_names())


def _merge_attributions(out: Path, runs: Sequence[RunResult], agent: str) -> Path | None:
    files = [Path(r.run_dir) / "attributions.csv" for r in runs if r.agent == agent and r.ok]
    files = [f for f in files if f.is_file()]
    if not files:
        return None
    attrs, feats, acts = [], [], []
    for f in files:
        a, feats, acts = explain.read_attributions(f)
        attrs += a
    attrs.sort(key=lambda a: (a.fold, a.seed))
    return explain.export_attributions(attrs, out / "shap" / agent / "attributions.csv", feats, acts)


def _run_job(job: _Job) -> RunResult:
    cfg, cohort, fold = job.config, job.cohort, job.fold
    run_dir = Path(cfg.out_dir) / "runs" / job.agent / str(fold.fold_index) / str(job.seed_index)
    res = RunResult(job.agent, fold.fold_index, job.seed_index, "ok", run_dir=str(run_dir))
    try:
        graph = cfg.graph()
        train_p, val_p, test_p = (cohort.subset(ids) for ids in (fold.train, fold.validation, fold.test))
        agent_cfg = cfg.agent_config(job.agent, job.seed_index)
        rng = substream(cfg.seed, "agent", job.agent, fold.fold_index, job.seed_index)
        scaler = fit_scaler(train_p, graph, cfg.env)
        out = train(agent_cfg, train_p, val_p, graph, cfg.env, cfg.param_map, scaler, rng)
        snapshot = out.snapshot
        snapshot.meta.update({"fold": fold.fold_index, "seed": job.seed_index})
        save_snapshot(snapshot, run_dir / "snapshot.npz")
        write_rows(run_dir / "curve.csv", ["epoch", "mean_return", "validation_mae"],
                   [[r["epoch"], r["mean_return"], r["validation_mae"]] for r in out.curve])

        preds = rollout_predictions(snapshot, test_p, [patient_params(p, cfg.param_map) for p in test_p],
                                    graph, cfg.env)
        res.mae, res.mse = score(preds, test_p)
        res.mae_raw, res.mse_raw = score(preds, test_p, raw=True)
        res.n_test, res.best_epoch = len(test_p), out.best_epoch
        _write_trajectories(run_dir / "trajectories.csv", preds, cohort, graph.region_names)

        _explain_run(cfg, cohort, fold, job.seed_index, snapshot, run_dir)
    except Exception as exc:  # recorded so the other runs still aggregate
        log.exception("run %s/%s/%s failed", job.agent, fold.fold_index, job.seed_index)
        res.status = f"failed: {type(exc).__name__}: {exc}"
    write_rows(run_dir / "metrics.csv",
               ["agent", "fold", "seed", "score_kind", "status", "n_test", "mae", "mse", "mae_raw", "mse_raw",
                "best_epoch"],
               [[res.agent, res.fold, res.seed, cfg.score_kind, res.status, res.n_test, res.mae, res.mse,
                 res.mae_raw, res.mse_raw, res.best_epoch]])
    return res


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std())


def summarize(runs: Sequence[RunResult], agents: Sequence[str], score_kind: str) -> list[dict]:
    """One Table-1 style row per agent.

    The headline std is across individual runs; the std of per-fold means is
    reported alongside.
    """
    rows = []
    for agent in agents:
        mine = [r for r in runs if r.agent == agent]
        ok = [r for r in mine if r.ok]
        mae_m, mae_s = _mean_std([r.mae for r in ok])
        mse_m, mse_s = _mean_std([r.mse for r in ok])
        folds = sorted({r.fold for r in ok})
        fold_mae = [np.mean([r.mae for r in ok if r.fold == f]) for f in folds]
        fold_mse = [np.mean([r.mse for r in ok if r.fold == f]) for f in folds]
        rows.append({
            "agent": agent,
            f"{score_kind}_MAE": "" if not ok else f"{mae_m:.3f} ({mae_s:.3f})",
            f"{score_kind}_MSE": "" if not ok else f"{mse_m:.3f} ({mse_s:.3f})",
            "n_runs": len(ok), "n_failed": len(mine) - len(ok), "complete": int(len(ok) == len(mine)),
            "mae_mean": mae_m, "mae_std": mae_s, "mse_mean": mse_m, "mse_std": mse_s,
            "mae_std_fold_means": _mean_std(fold_mae)[1], "mse_std_fold_means": _mean_std(fold_mse)[1],
            "mae_raw_mean": _mean_std([r.mae_raw for r in ok])[0],
            "mse_raw_mean": _mean_std([r.mse_raw for r in ok])[0],
        })
    return rows


def _write_mean_trajectories(out: Path, runs: Sequence[RunResult], agent: str) -> None:
    acc: dict[tuple[str, int], list[float]] = {}
    for r in runs:
        if r.agent != agent or not r.ok:
            continue
        for row in read_rows(Path(r.run_dir) / "trajectories.csv"):
            acc.setdefault((row["patient_id"], int(row["year"])), []).append(float(row["predicted"]))
    rows = [[pid, year, float(np.mean(v)), len(v)] for (pid, year), v in sorted(acc.items())]
    write_rows(out / "runs" / agent / "mean_trajectories.csv",
               ["patient_id", "year", "predicted_mean", "n_seeds"], rows)


def experiment_folds(config: ExperimentConfig, cohort: Cohort) -> list:
    """The folds an experiment runs, derived from its seed."""
    folds = kfold_split(cohort, config.k, _int_seed(substream(config.seed, "fold")))
    return folds if config.folds is None else [folds[i] for i in config.folds]


def run_experiment(config: ExperimentConfig, cohort: Cohort | None = None) -> ExperimentResult:
    """Train, predict, score and explain every agent x fold x seed combination.

    Writes ``runs/<agent>/<fold>/<seed>/{metrics.csv, curve.csv,
    trajectories.csv, snapshot.npz}``, ``summary.csv`` and
    ``shap/<agent>/attributions.csv`` under ``config.out_dir``.
    """
    problems = config.problems()
    if problems:
        raise ExperimentError("invalid experiment config:\n  " + "\n  ".join(problems))
    cohort = cohort if cohort is not None else config.load()
    score_kind = cohort.score_kind
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.explain_scope == "patient" and config.explain_patient not in cohort.ids:
        raise ExperimentError(f"unknown patient id {config.explain_patient!r}")

    folds = experiment_folds(config, cohort)
    jobs = [_Job(config, cohort, agent, f, s) for agent in config.agents for f in folds
            for s in range(config.seeds)]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            runs = list(pool.map(_run_job, jobs))
    else:
        runs = [_run_job(j) for j in jobs]

    summary = summarize(runs, config.agents, score_kind)
    header = list(summary[0].keys())
    write_rows(out / "summary.csv", header, [[row[h] for h in header] for row in summary])

    for agent in config.agents:
        _write_mean_trajectories(out, runs, agent)
        _merge_attributions(out, runs, agent)
    result = ExperimentResult(runs, summary, score_kind, out, cohort_fingerprint(cohort))
    if not result.complete:
        log.warning("%d of %d runs failed", sum(not r.ok for r in runs), len(runs))
    return result


def explain_saved_runs(config: ExperimentConfig, cohort: Cohort | None = None,
                       agents: Sequence[str] | None = None) -> dict[str, Path]:
    """Recompute attributions from the snapshots already under ``config.out_dir``."""
    cohort = cohort if cohort is not None else config.load()
    if config.explain_scope == "patient" and config.explain_patient not in cohort.ids:
        raise ExperimentError(f"unknown patient id {config.explain_patient!r}")
    out = Path(config.out_dir)
    written = {}
    for agent in agents or config.agents:
        runs = []
        for fold in experiment_folds(config, cohort):
            for s in range(config.seeds):
                run_dir = out / "runs" / agent / str(fold.fold_index) / str(s)
                snap_path = run_dir / "snapshot.npz"
                if not snap_path.is_file():
                    raise ExperimentError(f"missing snapshot {snap_path}")
                _explain_run(config, cohort, fold, s, load_snapshot(snap_path), run_dir)
                runs.append(RunResult(agent, fold.fold_index, s, "ok", run_dir=str(run_dir)))
        path = _merge_attributions(out, runs, agent)
        if path is not None:
            written[agent] = path
    return written


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


@dataclass
class AgentRanking:
    order: list[str]
    mae: dict[str, float]
    spread: dict[str, tuple[float, float]]
    pairwise: dict[tuple[str, str], float]

    def lines(self) -> list[str]:
        out = [f"{i + 1}. {a}: MAE {self.mae[a]:.4f} (runs {self.spread[a][0]:.4f}..{self.spread[a][1]:.4f})"
               for i, a in enumerate(self.order)]
        for (a, b), d in self.pairwise.items():
            out.append(f"   {a} - {b}: {d:+.4f}")
        return out


def compare_agents(results: ExperimentResult | Sequence[ExperimentResult]) -> AgentRanking:
    """Agents sorted by mean MAE (ties keep input order) with pairwise differences."""
    if isinstance(results, ExperimentResult):
        results = [results]
    if len({r.cohort_id for r in results}) > 1:
        raise ExperimentError("results were scored on different cohorts")
    runs = [run for r in results for run in r.runs if run.ok]
    agents = list(dict.fromkeys(run.agent for run in runs))
    if len(agents) < 2:
        raise ExperimentError("need at least two scored agents to compare")
    mae = {a: float(np.mean([r.mae for r in runs if r.agent == a])) for a in agents}
    spread = {a: (min(r.mae for r in runs if r.agent == a), max(r.mae for r in runs if r.agent == a))
              for a in agents}
    order = sorted(agents, key=lambda a: mae[a])
    pairwise = {(a, b): mae[a] - mae[b] for i, a in enumerate(order) for b in order[i + 1:]}
    return AgentRanking(order, mae, spread, pairwise)


def global_ranking(attribution_csv: str | Path) -> list[tuple[str, float]]:
    """Feature ranking by mean |phi| from an exported attribution file."""
    attrs, feats, acts = explain.read_attributions(attribution_csv)
    return explain.aggregate_global(attrs, feats, acts).ranking()
