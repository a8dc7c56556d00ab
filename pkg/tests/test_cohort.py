import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adprogress import brainsim
from adprogress.brainsim import ModelParams
from adprogress.cohort import (CSV_COLUMNS, Cohort, CohortError, Demographics, ParamMap, PatientRecord,
                               SynthSpec, demographic_params, denormalize_score, fit_scaler,
                               generate_synthetic_cohort, kfold_split, load_cohort, normalize_score,
                               patient_params, save_cohort, simulate_cost_efficient)


def record(pid="P1", scores=(27, 26, None, 25) + (None,) * 7, kind="MMSE", size=(2.0, 4.0), **kw):
    return PatientRecord(pid, Demographics(70.0, "F", 16.0, True), size, (1.0, 1.2), scores, kind, **kw)


def write_csv(path, rows, header=CSV_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def row(pid, scores):
    return [pid, "71", "M", "14", "0", "MMSE", "3.0", "5.0", "1.1", "1.3", "", "", "", "", *scores]


FULL = ["28", "27", "", "26"] + [""] * 7


# --- score scales ---------------------------------------------------------


def test_normalize_examples():
    assert normalize_score(30, "MMSE") == 10.0
    assert normalize_score(0, "MMSE") == 0.0
    assert normalize_score(0, "ADAS13") == 10.0
    assert normalize_score(85, "ADAS13") == 0.0
    assert denormalize_score(10.0, "ADAS13") == 0.0
    with pytest.raises(CohortError):
        normalize_score(31, "MMSE")
    with pytest.raises(CohortError):
        normalize_score(-1, "ADAS13")


@given(st.floats(0, 30))
def test_mmse_round_trip(raw):
    assert abs(denormalize_score(normalize_score(raw, "MMSE"), "MMSE") - raw) <= 1e-9


@given(st.floats(0, 85))
def test_adas_round_trip(raw):
    assert abs(denormalize_score(normalize_score(raw, "ADAS13"), "ADAS13") - raw) <= 1e-9


def test_denormalize_arrays():
    np.testing.assert_allclose(denormalize_score(np.array([0.0, 10.0]), "MMSE"), [0, 30])


# --- records and loading --------------------------------------------------


def test_record_invariants():
    with pytest.raises(CohortError, match="year-0"):
        record(scores=(None, 26, 25) + (None,) * 8)
    with pytest.raises(CohortError, match="fewer than 2 follow-ups"):
        record(scores=(27, 26) + (None,) * 9)
    with pytest.raises(CohortError, match="outside"):
        record(scores=(31, 26, 25) + (None,) * 8)
    with pytest.raises(CohortError):
        record(scores=(27, 26, 25))
    r = record()
    assert r.baseline_cognition == pytest.approx(9.0)
    assert np.isnan(r.normalized_scores()[2])


def test_cohort_invariants():
    with pytest.raises(CohortError):
        Cohort(())
    with pytest.raises(CohortError, match="duplicate"):
        Cohort((record("A"), record("A")))
    adas = record("B", scores=(20, 21, 22) + (None,) * 8, kind="ADAS13")
    with pytest.raises(CohortError):
        Cohort((record("A"), adas), "MMSE")


def test_load_three_rows(tmp_path):
    path = write_csv(tmp_path / "c.csv", [row(f"P{i}", FULL) for i in range(3)])
    c = load_cohort(path)
    assert len(c) == 3 and c.score_kind == "MMSE"
    assert c.get("P1").params_override is None


def test_load_duplicate_id_names_it(tmp_path):
    path = write_csv(tmp_path / "c.csv", [row("X9", FULL), row("X9", FULL)])
    with pytest.raises(CohortError, match="X9"):
        load_cohort(path)


def test_load_rejects_short_rows(tmp_path):
    path = write_csv(tmp_path / "c.csv", [row("A", FULL), row("B", ["28"] + [""] * 10)])
    with pytest.raises(CohortError) as err:
        load_cohort(path)
    assert any("fewer than 2 follow-ups" in d for d in err.value.diagnostics)
    lenient = load_cohort(path, strict=False)
    assert lenient.ids == ["A"]
    assert "fewer than 2 follow-ups" in lenient.rejected[0]


def test_load_malformed_header_and_values(tmp_path):
    with pytest.raises(CohortError, match="header"):
        load_cohort(write_csv(tmp_path / "h.csv", [["x"]], header=("patient_id", "age")))
    bad = row("A", FULL)
    bad[1] = "old"
    with pytest.raises(CohortError, match="non-numeric"):
        load_cohort(write_csv(tmp_path / "v.csv", [bad]))
    with pytest.raises(CohortError, match="not found"):
        load_cohort(tmp_path / "missing.csv")


def test_save_load_round_trip(tmp_path, small_synth):
    path = save_cohort(small_synth.cohort, tmp_path / "c.csv")
    back = load_cohort(path)
    assert back == small_synth.cohort
    for a, b in zip(back, small_synth.cohort):
        assert a.params_override.alpha1 == b.params_override.alpha1


# --- demographic map ------------------------------------------------------


def test_demographic_map_examples():
    z = Demographics(80.0, "M", 12.0, True)
    base = ParamMap()
    p = demographic_params(z, base)
    assert (p.alpha1, p.alpha2, p.beta, p.gamma_act) == (0.05, 0.02, 0.1, 2.0)
    override = ModelParams(alpha1=0.3)
    assert demographic_params(z, base, override) is override
    m = ParamMap(intercepts={"alpha1": 0.02, "alpha2": 0.0, "beta": 0.0, "gamma_act": 1.0},
                 coefficients={"alpha1": {"apoe4": 0.01}})
    assert demographic_params(z, m).alpha1 == pytest.approx(0.03)


def test_demographic_map_clamps_and_standardizes():
    m = ParamMap(coefficients={"beta": {"age": -1.0}, "gamma_act": {"education": 0.5}})
    p = demographic_params(Demographics(80.0, "F", 19.0, False), m)
    assert p.beta == 0.0
    assert p.gamma_act == pytest.approx(2.0 + 0.5 * (19 - 16) / 3)


def test_patient_params_prefers_override():
    r = record(params_override=ModelParams(alpha1=0.11, alpha2=0.01, beta=0.2, gamma_act=3.0))
    p = patient_params(r, ParamMap(lambda_tradeoff=2.0))
    assert p.alpha1 == 0.11 and p.lambda_tradeoff == 2.0
    assert patient_params(record()).alpha1 == 0.05


# --- synthetic cohorts ----------------------------------------------------


def test_default_synthetic_cohort(default_synth):
    c = default_synth.cohort
    assert len(c) == 160
    assert all(len(r.scores) == 11 and None not in r.scores for r in c)
    assert default_synth.clean.shape == (160, 11)


def test_synthetic_is_deterministic(small_synth):
    again = generate_synthetic_cohort(SynthSpec(n_patients=24), seed=3)
    assert again.cohort == small_synth.cohort
    other = generate_synthetic_cohort(SynthSpec(n_patients=24), seed=4)
    assert other.cohort != small_synth.cohort


def test_frozen_synthetic_scores_are_constant():
    # cognition starts at the demand ceiling, so the allocation policy has nothing to add
    spec = SynthSpec(n_patients=30, noise_sd=0.0, alpha1_range=(0, 0), alpha2_range=(0, 0),
                     beta_range=(0, 0), cognition_range=(10.0, 10.0))
    syn = generate_synthetic_cohort(spec, seed=1)
    for r in syn.cohort:
        assert np.ptp(r.scores) <= 1e-9


def test_replaying_embedded_params_reproduces_clean_scores(small_synth, graph):
    records = list(small_synth.cohort)
    params = ModelParams.stack([r.params_override for r in records])
    replay = simulate_cost_efficient(records, params, graph)
    assert replay.tobytes() == small_synth.clean.tobytes()


def test_synthetic_adas_kind():
    syn = generate_synthetic_cohort(SynthSpec(n_patients=5, score_kind="ADAS13"), seed=0)
    assert syn.cohort.score_kind == "ADAS13"
    np.testing.assert_allclose([r.baseline_cognition for r in syn.cohort], syn.clean[:, 0])


def test_synthetic_spec_validation():
    with pytest.raises(CohortError):
        SynthSpec(n_patients=0)
    with pytest.raises(CohortError):
        SynthSpec(size_range=(5.0, 1.0))
    with pytest.raises(CohortError):
        SynthSpec(cognition_range=(6.0, 12.0))


# --- folds and scaling ----------------------------------------------------


def test_kfold_sizes_for_160(default_synth):
    folds = kfold_split(default_synth.cohort, 5, seed=0)
    assert [len(f.test) for f in folds] == [32] * 5
    for f in folds:
        assert 102 <= len(f.train) <= 103 and 25 <= len(f.validation) <= 26
    assert sorted(i for f in folds for i in f.test) == sorted(default_synth.cohort.ids)
    assert kfold_split(default_synth.cohort, 5, seed=0) == folds


def test_kfold_errors(small_synth):
    with pytest.raises(CohortError):
        kfold_split(small_synth.cohort, 1)
    tiny = Cohort(tuple(list(small_synth.cohort)[:2]))
    with pytest.raises(CohortError):
        kfold_split(tiny, 3)


@given(st.integers(2, 10), st.integers(0, 2**32 - 1), st.integers(20, 80))
@settings(max_examples=40, deadline=None)
def test_fold_partition_property(k, seed, n):
    c = Cohort(tuple(record(f"P{i}") for i in range(n)))
    folds = kfold_split(c, k, seed)
    tests = [set(f.test) for f in folds]
    assert set().union(*tests) == set(c.ids)
    assert sum(len(t) for t in tests) == n
    for f in folds:
        parts = [set(f.train), set(f.validation), set(f.test)]
        assert set().union(*parts) == set(c.ids)
        assert sum(len(p) for p in parts) == n
        assert abs(len(f.test) - n / k) <= 1
        rest = n - len(f.test)
        assert abs(len(f.validation) - 0.2 * rest) <= 1
        assert abs(len(f.train) - 0.8 * rest) <= 1


def test_scaler_margin_rule(graph):
    a = record("A", size=(2.0, 3.0))
    b = record("B", size=(4.0, 3.0))
    s = fit_scaler([a, b], graph)
    assert (s.low[0], s.high[0]) == pytest.approx((1.9, 4.1))
    assert (s.low[1], s.high[1]) == pytest.approx((2.5, 3.5))


def test_scaler_single_patient_and_own_data(graph, small_synth):
    s = fit_scaler([record()], graph)
    assert np.all(s.high - s.low == 1.0)
    records = list(small_synth.cohort)
    s = fit_scaler(records, graph)
    z = s.transform(brainsim.reset_batch(records, graph).features())
    assert z.min() >= 0 and z.max() <= 1
    np.testing.assert_allclose(s.inverse_transform(z), brainsim.reset_batch(records, graph).features())
    with pytest.raises(CohortError):
        fit_scaler([], graph)
