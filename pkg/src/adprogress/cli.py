"""Command-line entry point: ``adprogress generate|train|explain|report``.

Configuration is a YAML file whose keys mirror :class:`ExperimentConfig`.
Any key can be overridden from the environment with the ``ADPROGRESS_``
prefix; nested keys use a double underscore and values are parsed as YAML,
e.g. ``ADPROGRESS_SEEDS=1`` or ``ADPROGRESS_ENV__SUBSTEPS=50``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .brainsim import EnvConfig
from .cohort import CohortError, ParamMap, SynthSpec, generate_synthetic_cohort, save_cohort
from .explain import aggregate_global, read_attributions
from .harness import (ExperimentConfig, ExperimentError, RunResult, explain_saved_runs, read_rows,
                      run_experiment, summarize, write_rows)

ENV_PREFIX = "ADPROGRESS_"
CONFIG_NAME = "config.yaml"
log = logging.getLogger("adprogress")


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    d = asdict(cfg)
    for key in ("synth", "param_map", "env"):
        if d[key] is not None:
            d[key] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d[key].items()}
    if d["param_map"] is not None:
        d["param_map"] = {k: (dict(v) if isinstance(v, Mapping) else v) for k, v in d["param_map"].items()}
        d["param_map"]["coefficients"] = {k: dict(v) for k, v in d["param_map"]["coefficients"].items()}
    return d


def _nested(cls, data: Mapping | None):
    if data is None:
        return None
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ExperimentError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    data = {k: (tuple(v) if isinstance(v, list) and cls is SynthSpec else v) for k, v in data.items()}
    return cls(**data)


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    data = dict(data or {})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ExperimentError(f"unknown config keys: {sorted(unknown)}")
    if data.get("cohort_path") is not None and "synth" not in data:
        data["synth"] = None
    if "synth" in data:
        data["synth"] = _nested(SynthSpec, data["synth"])
    if "param_map" in data:
        data["param_map"] = _nested(ParamMap, data["param_map"])
    if "env" in data:
        data["env"] = _nested(EnvConfig, data["env"])
    try:
        return ExperimentConfig(**data)
    except (TypeError, CohortError, ValueError) as exc:
        raise ExperimentError(str(exc)) from None


def apply_env_overrides(data: dict[str, Any], environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = data
        for part in path[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = node[part] = {}
            node = child
        node[path[-1]] = yaml.safe_load(raw)
    return data


def load_config(path: str | Path | None, environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ExperimentError(f"config file not found: {path}")
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ExperimentError(f"{path}: top level must be a mapping")
    return config_from_dict(apply_env_overrides(data, environ))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def _with_flags(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    data = config_to_dict(cfg)
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
        data["cohort_seed"] = args.seed
    if getattr(args, "agents", None):
        data["agents"] = [a.strip().upper() for a in args.agents.split(",") if a.strip()]
    if getattr(args, "out", None) and args.command != "generate":
        data["out_dir"] = str(args.out)
    if getattr(args, "patient", None):
        data["explain_patient"] = args.patient
        data["explain_scope"] = "patient"
    if getattr(args, "scope", None):
        data["explain_scope"] = args.scope
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig, out: Path) -> int:
    if cfg.synth is None:
        raise ExperimentError("generate needs a synth section in the config")
    spec = cfg.synth if cfg.synth.score_kind == cfg.score_kind else \
        SynthSpec(**{**asdict(cfg.synth), "score_kind": cfg.score_kind})
    syn = generate_synthetic_cohort(spec, cfg.cohort_seed, cfg.graph(), cfg.env)
    try:
        save_cohort(syn.cohort, out)
    except OSError as exc:
        raise ExperimentError(f"cannot write {out}: {exc}") from None
    base, last = syn.clean[:, 0], syn.clean[:, -1]
    print(f"wrote {len(syn.cohort)} patients ({spec.score_kind}) to {out}")
    print(f"baseline cognition mean {base.mean():.3f}, year-10 mean {last.mean():.3f}, "
          f"decliners {np.mean(last < base - 0.5):.1%}")
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    problems = cfg.problems()
    if problems:
        raise ExperimentError("invalid experiment config:\n  " + "\n  ".join(problems))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(dump_config(cfg), encoding="utf-8")
    result = run_experiment(cfg)
    _print_table(result.summary, result.score_kind)
    failed = [r for r in result.runs if not r.ok]
    for r in failed:
        print(f"FAILED {r.agent} fold {r.fold} seed {r.seed}: {r.status}", file=sys.stderr)
    return 0 if not failed else 1


def cmd_explain(cfg: ExperimentConfig, check_efficiency: bool = False, tol: float = 1e-6) -> int:
    written = explain_saved_runs(cfg)
    status = 0
    for agent, path in written.items():
        attrs, feats, acts = read_attributions(path)
        print(f"{agent}: {len(attrs)} explained states, {len(attrs) * len(feats) * len(acts)} rows -> {path}")
        if check_efficiency:
            gap = max(a.efficiency_gap() for a in attrs)
            ok = gap <= tol
            status |= 0 if ok else 1
            print(f"{agent}: max efficiency gap {gap:.3e} ({'ok' if ok else 'FAILED'})")
    return status


def _print_table(summary: Sequence[dict], kind: str) -> None:
    cols = ["agent", f"{kind}_MAE", f"{kind}_MSE", "n_runs"]
    print("  ".join(f"{c:>16}" for c in cols))
    for row in summary:
        print("  ".join(f"{str(row[c]):>16}" for c in cols))


def cmd_report(run_dir: Path) -> int:
    metric_files = sorted(run_dir.glob("runs/*/*/*/metrics.csv"))
    if not metric_files:
        raise ExperimentError(f"no completed runs under {run_dir}")
    runs, kinds = [], set()
    for f in metric_files:
        for row in read_rows(f):
            kinds.add(row["score_kind"])
            num = lambda k: float(row[k]) if row[k] else float("nan")  # noqa: E731
            runs.append(RunResult(row["agent"], int(row["fold"]), int(row["seed"]), row["status"], num("mae"),
                                  num("mse"), num("mae_raw"), num("mse_raw"), int(row["n_test"]),
                                  int(row["best_epoch"]), str(f.parent)))
    kind = sorted(kinds)[0]
    agents = list(dict.fromkeys(r.agent for r in runs))
    expected = None
    if (run_dir / CONFIG_NAME).is_file():
        cfg = load_config(run_dir / CONFIG_NAME, environ={})
        n_folds = len(cfg.folds) if cfg.folds is not None else cfg.k
        expected = {a: n_folds * cfg.seeds for a in cfg.agents}
        agents = [a for a in cfg.agents if a in agents] + [a for a in agents if a not in cfg.agents]
    summary = summarize(runs, agents, kind)
    for row in summary:
        n_all = row["n_runs"] + row["n_failed"]
        if expected and n_all < expected.get(row["agent"], 0):
            print(f"warning: {row['agent']} has {n_all} of {expected[row['agent']]} runs", file=sys.stderr)
        if row["n_failed"]:
            print(f"warning: {row['agent']} has {row['n_failed']} failed runs", file=sys.stderr)
    if expected:
        for a in expected:
            if a not in agents:
                print(f"warning: no runs found for {a}", file=sys.stderr)
    _print_table(summary, kind)
    header = list(summary[0].keys())
    write_rows(run_dir / "report_summary.csv", header, [[r[h] for h in header] for r in summary])

    rank_rows = []
    for agent in agents:
        path = run_dir / "shap" / agent / "attributions.csv"
        if not path.is_file():
            continue
        attrs, feats, acts = read_attributions(path)
        ranking = aggregate_global(attrs, feats, acts).ranking()
        print(f"\n{agent} feature ranking (mean |phi| summed over actions):")
        for i, (name, value) in enumerate(ranking, 1):
            print(f"  {i}. {name:<10} {value:.6f}")
            rank_rows.append([agent, i, name, value])
    if rank_rows:
        write_rows(run_dir / "feature_ranking.csv", ["agent", "rank", "feature", "mean_abs_phi"], rank_rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adprogress", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help: str):
        sp.add_argument("--config", type=Path, help="YAML experiment config")
        sp.add_argument("--out", type=Path, help=out_help)
        sp.add_argument("--seed", type=int, help="experiment seed (also seeds the synthetic cohort)")

    g = sub.add_parser("generate", help="write a synthetic cohort CSV")
    common(g, "output CSV path (default cohort.csv)")
    t = sub.add_parser("train", help="cross-validated training, scoring and explanations")
    common(t, "output directory")
    t.add_argument("--agents", help="comma-separated agent list, e.g. TRPO,PPO")
    e = sub.add_parser("explain", help="recompute attributions from saved snapshots")
    common(e, "run directory holding runs/")
    e.add_argument("--agents")
    e.add_argument("--scope", choices=["test", "cohort", "patient"])
    e.add_argument("--patient", help="patient id (implies --scope patient)")
    e.add_argument("--check-efficiency", action="store_true", help="verify phi0 + sum(phi) = f(x) per state")
    r = sub.add_parser("report", help="print the summary table and feature rankings")
    r.add_argument("run_dir", type=Path, nargs="?")
    r.add_argument("--out", type=Path, help="run directory (alternative to the positional argument)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            run_dir = args.run_dir or args.out
            if run_dir is None:
                raise ExperimentError("report needs a run directory")
            return cmd_report(Path(run_dir))
        config_path = args.config
        if config_path is None and args.command == "explain" and args.out and (args.out / CONFIG_NAME).is_file():
            config_path = args.out / CONFIG_NAME
        cfg = _with_flags(load_config(config_path), args)
        if args.command == "generate":
            return cmd_generate(cfg, args.out or Path("cohort.csv"))
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_explain(cfg, args.check_efficiency)
    except (ExperimentError, CohortError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
