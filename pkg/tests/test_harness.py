import math
from pathlib import Path

import numpy as np
import pytest

from adprogress.brainsim import BrainGraph, ModelParams
from adprogress.cohort import Cohort, Demographics, PatientRecord, SynthSpec
from adprogress.harness import (ExperimentConfig, ExperimentError, ExperimentResult, RunResult,
                                TrajectoryPrediction, compare_agents, global_ranking, read_rows,
                                rollout_prediction, run_experiment, score, substream, summarize)
from adprogress.neural import Network, PolicySnapshot, param_count


def rec(pid, scores):
    return PatientRecord(pid, Demographics(70.0, "M", 16.0, False), (3.0, 5.0), (1.0, 1.0), scores, "MMSE")


def pred(pid, cog):
    cog = np.asarray(cog, dtype=float)
    return TrajectoryPrediction(pid, cog, cog * 3, None, None, None, None, False)


FULL = [24.0] * 11


def test_score_examples():
    truth = [rec("A", FULL), rec("B", [30.0, 27.0, None, 21.0] + [None] * 7)]
    perfect = [pred("A", np.full(11, 8.0)), pred("B", [10, 9, 0, 7] + [0] * 7)]
    assert score(perfect, truth) == (0.0, 0.0)
    off = [pred("A", np.full(11, 10.0)), pred("B", [10, 11, 0, 9] + [0] * 7)]
    assert score(off, truth) == (2.0, 4.0)
    # errors of 1 and 3 on B's two follow-ups; the baseline is never scored
    assert score([pred("B", [99, 10, 5, 10] + [0] * 7)], truth) == (2.0, 5.0)
    with pytest.raises(ExperimentError):
        score([pred("Z", np.zeros(11))], truth)


def zero_snapshot():
    net = Network((6, 2), np.zeros(param_count((6, 2))))
    return PolicySnapshot("TRPO", "gaussian", net, np.zeros(6), np.full(6, 10.0), 2.0, np.zeros(2))


def test_frozen_rollout_is_flat(graph):
    frozen = ModelParams(alpha1=0.0, alpha2=0.0, beta=0.0, gamma_act=2.0)
    p = rec("A", FULL)
    out = rollout_prediction(zero_snapshot(), p, frozen, graph)
    assert out.cognition.shape == (11,)
    np.testing.assert_allclose(out.cognition, p.baseline_cognition)
    np.testing.assert_allclose(out.raw, 24.0)
    again = rollout_prediction(zero_snapshot(), p, frozen, graph)
    assert again.cognition.tobytes() == out.cognition.tobytes()


def test_substreams_are_independent_and_stable():
    a = substream(0, "agent", "TRPO", 1, 0).random(3)
    assert a.tobytes() == substream(0, "agent", "TRPO", 1, 0).random(3).tobytes()
    assert not np.array_equal(a, substream(0, "agent", "TRPO", 1, 1).random(3))
    assert not np.array_equal(a, substream(1, "agent", "TRPO", 1, 0).random(3))


def test_config_validation_lists_everything(tmp_path):
    with pytest.raises(ExperimentError) as err:
        ExperimentConfig(k=1, seeds=0, explain_scope="bogus", agents=["A2C"])
    text = str(err.value)
    for fragment in ("k must be", "seeds must be", "explain_scope", "A2C"):
        assert fragment in text
    cfg = ExperimentConfig(cohort_path=str(tmp_path / "nope.csv"), synth=None)
    assert any("not found" in p for p in cfg.problems())
    with pytest.raises(ExperimentError):
        ExperimentConfig(cohort_path="x.csv")  # two cohort sources


def small_config(out, **kw):
    base = dict(synth=SynthSpec(n_patients=20), agents=["TRPO"], k=2, seeds=1, epochs=2, batch_size=100,
                out_dir=str(out), agent_overrides={"TRPO": {"hidden_sizes": [8, 8], "value_epochs": 1}})
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    return run_experiment(small_config(out)), out


def test_smoke_layout(smoke):
    res, out = smoke
    assert len(res.runs) == 2 and res.complete
    assert len(res.summary) == 1 and res.summary[0]["n_runs"] == 2
    for r in res.runs:
        d = Path(r.run_dir)
        for name in ("metrics.csv", "curve.csv", "trajectories.csv", "snapshot.npz", "attributions.csv"):
            assert (d / name).is_file(), name
        assert r.mae <= math.sqrt(r.mse) + 1e-12
        assert len(read_rows(d / "curve.csv")) == 2
    assert (out / "summary.csv").is_file()
    assert (out / "shap" / "TRPO" / "attributions.csv").is_file()
    assert res.summary[0]["mae_mean"] == pytest.approx(np.mean([r.mae for r in res.runs]))
    header = read_rows(out / "summary.csv")[0]
    assert "MMSE_MAE" in header and "MMSE_MSE" in header


def test_test_scope_row_count(smoke):
    res, out = smoke
    rows = read_rows(out / "shap" / "TRPO" / "attributions.csv")
    # every patient is in exactly one test fold; 10 steps x 6 features x 2 actions each
    assert len(rows) == 20 * 10 * 6 * 2


def test_trajectories_start_at_baseline(smoke):
    res, out = smoke
    rows = read_rows(Path(res.runs[0].run_dir) / "trajectories.csv")
    for r in rows:
        if r["year"] == "0":
            assert float(r["predicted"]) == float(r["observed"])


def test_rerun_is_byte_identical(smoke, tmp_path):
    res, out = smoke
    again = run_experiment(small_config(tmp_path))
    for name in ("summary.csv", "shap/TRPO/attributions.csv", "runs/TRPO/0/0/metrics.csv",
                 "runs/TRPO/1/0/trajectories.csv", "runs/TRPO/1/0/snapshot.npz"):
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_failed_runs_are_recorded(tmp_path):
    cfg = small_config(tmp_path, agents=["TRPO", "PPO"], explain_scope="none",
                       agent_overrides={"PPO": {"hidden_sizes": [0]}})
    res = run_experiment(cfg)
    assert not res.complete
    by_agent = {row["agent"]: row for row in res.summary}
    assert by_agent["TRPO"]["complete"] == 1 and by_agent["PPO"]["n_failed"] == 2
    status = read_rows(tmp_path / "runs" / "PPO" / "0" / "0" / "metrics.csv")[0]["status"]
    assert status.startswith("failed")


def test_patient_scope(tmp_path):
    cfg = small_config(tmp_path, explain_scope="patient", explain_patient="S0003")
    run_experiment(cfg)
    rows = read_rows(tmp_path / "shap" / "TRPO" / "attributions.csv")
    assert {r["patient_id"] for r in rows} == {"S0003"} and len(rows) == 10 * 12
    with pytest.raises(ExperimentError):
        run_experiment(small_config(tmp_path / "x", explain_scope="patient", explain_patient="nobody"))


def run(agent, mae, fold=0, seed=0):
    return RunResult(agent, fold, seed, "ok", mae=mae, mse=mae ** 2)


def result(runs, cohort_id="c"):
    return ExperimentResult(runs, [], "MMSE", Path("."), cohort_id)


def test_compare_agents():
    ranking = compare_agents(result([run("PPO", 1.7), run("TRPO", 0.5)]))
    assert ranking.order == ["TRPO", "PPO"]
    assert ranking.pairwise[("TRPO", "PPO")] == pytest.approx(-1.2)
    tie = compare_agents(result([run("SAC", 1.0), run("DDPG", 1.0)]))
    assert tie.order == ["SAC", "DDPG"]
    assert any("SAC" in line for line in tie.lines())
    with pytest.raises(ExperimentError):
        compare_agents([result([run("A", 1.0)], "x"), result([run("B", 1.0)], "y")])
    with pytest.raises(ExperimentError):
        compare_agents(result([run("A", 1.0)]))


def test_summarize_std_conventions():
    runs = [run("X", 1.0, 0, 0), run("X", 3.0, 0, 1), run("X", 2.0, 1, 0), run("X", 2.0, 1, 1)]
    row = summarize(runs, ["X"], "MMSE")[0]
    assert row["mae_mean"] == 2.0
    assert row["mae_std"] == pytest.approx(np.std([1, 3, 2, 2]))
    assert row["mae_std_fold_means"] == 0.0
    assert row["MMSE_MAE"] == "2.000 (0.707)"


def test_global_ranking_lists_all_features(smoke):
    res, out = smoke
    ranking = global_ranking(out / "shap" / "TRPO" / "attributions.csv")
    assert sorted(n for n, _ in ranking) == sorted(BrainGraph.two_region().feature_names())
    scores = [s for _, s in ranking]
    assert scores == sorted(scores, reverse=True)
