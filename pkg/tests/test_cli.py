import csv

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from adprogress.cli import (apply_env_overrides, config_from_dict, config_to_dict, dump_config, load_config,
                            main)
from adprogress.cohort import SynthSpec
from adprogress.harness import ExperimentConfig, ExperimentError

SMOKE = {
    "synth": {"n_patients": 16},
    "agents": ["TRPO"], "k": 2, "seeds": 1, "epochs": 2, "batch_size": 100,
    "agent_overrides": {"TRPO": {"hidden_sizes": [8, 8], "value_epochs": 1}},
}


def write_config(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


def test_config_round_trip():
    cfg = config_from_dict(SMOKE)
    text = dump_config(cfg)
    again = config_from_dict(yaml.safe_load(text))
    assert again == cfg
    assert dump_config(again) == text
    assert config_from_dict({}) == ExperimentConfig()


@given(st.integers(2, 9), st.integers(1, 5), st.sampled_from(["test", "cohort", "none"]),
       st.integers(0, 2**31), st.floats(0.0, 1.0))
@settings(max_examples=25)
def test_config_round_trip_property(k, seeds, scope, seed, noise):
    cfg = ExperimentConfig(k=k, seeds=seeds, explain_scope=scope, seed=seed, synth=SynthSpec(noise_sd=noise))
    assert config_from_dict(yaml.safe_load(dump_config(cfg))) == cfg


def test_unknown_keys_rejected():
    with pytest.raises(ExperimentError, match="unknown"):
        config_from_dict({"epochz": 3})
    with pytest.raises(ExperimentError, match="unknown"):
        config_from_dict({"synth": {"n_patient": 3}})


def test_env_overrides():
    data = apply_env_overrides({"k": 5}, {"ADPROGRESS_K": "3", "ADPROGRESS_ENV__SUBSTEPS": "50",
                                          "ADPROGRESS_AGENTS": "[PPO, SAC]", "OTHER": "1"})
    assert data == {"k": 3, "env": {"substeps": 50}, "agents": ["PPO", "SAC"]}
    cfg = load_config(None, {"ADPROGRESS_SEEDS": "2", "ADPROGRESS_SYNTH__NOISE_SD": "0.0"})
    assert cfg.seeds == 2 and cfg.synth.noise_sd == 0.0


def test_cohort_path_replaces_synth(tmp_path):
    cfg = config_from_dict({"cohort_path": str(tmp_path / "c.csv")})
    assert cfg.synth is None
    assert config_to_dict(cfg)["synth"] is None


def test_generate(tmp_path, capsys):
    out = tmp_path / "c.csv"
    assert main(["generate", "--out", str(out), "--seed", "4"]) == 0
    rows = list(csv.reader(out.open()))
    assert len(rows) == 161
    assert "160 patients" in capsys.readouterr().out
    out2 = tmp_path / "c2.csv"
    main(["generate", "--out", str(out2), "--seed", "4"])
    assert out.read_bytes() == out2.read_bytes()


def test_generate_rejects_empty_cohort(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ADPROGRESS_SYNTH__N_PATIENTS", "0")
    assert main(["generate", "--out", str(tmp_path / "c.csv")]) != 0
    assert "n_patients" in capsys.readouterr().err


def test_train_missing_cohort_file(tmp_path, capsys):
    cfg = write_config(tmp_path, {"cohort_path": str(tmp_path / "missing.csv"), "agents": ["TRPO"]})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) != 0
    assert "not found" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "none.yaml")]) == 2
    assert "config file not found" in capsys.readouterr().err


def test_validation_errors_listed_together(tmp_path, capsys):
    cfg = write_config(tmp_path, {**SMOKE, "k": 1, "seeds": 0})
    assert main(["train", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "k must be" in err and "seeds must be" in err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp, SMOKE)
    out = tmp / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


def test_train_writes_config_and_table(trained):
    cfg, out = trained
    saved = load_config(out / "config.yaml", environ={})
    assert saved.out_dir == str(out) and saved.agents == ["TRPO"]
    assert (out / "summary.csv").is_file()


def test_report(trained, capsys):
    _, out = trained
    assert main(["report", str(out)]) == 0
    text = capsys.readouterr().out
    assert "TRPO" in text and "feature ranking" in text
    ranking = list(csv.DictReader((out / "feature_ranking.csv").open()))
    assert len(ranking) == 6 and [r["rank"] for r in ranking] == [str(i) for i in range(1, 7)]
    assert (out / "report_summary.csv").is_file()


def test_report_warns_about_missing_runs(trained, tmp_path, capsys):
    _, out = trained
    import shutil
    copy = tmp_path / "partial"
    shutil.copytree(out, copy)
    shutil.rmtree(copy / "runs" / "TRPO" / "1")
    assert main(["report", str(copy)]) == 0
    assert "1 of 2 runs" in capsys.readouterr().err


def test_report_empty_dir(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 2
    assert "no completed runs" in capsys.readouterr().err


def test_explain_patient_and_efficiency(trained, capsys):
    _, out = trained
    assert main(["explain", "--out", str(out), "--patient", "S0002", "--check-efficiency"]) == 0
    text = capsys.readouterr().out
    assert "10 explained states, 120 rows" in text and "ok" in text


def test_explain_cohort_scope_row_count(trained, capsys):
    _, out = trained
    assert main(["explain", "--out", str(out), "--scope", "cohort"]) == 0
    # each of the 2 fold snapshots explains all 16 patients
    assert f"{2 * 16 * 10} explained states, {2 * 16 * 10 * 12} rows" in capsys.readouterr().out


def test_explain_missing_snapshot(tmp_path, capsys):
    cfg = write_config(tmp_path, SMOKE)
    assert main(["explain", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 2
    assert "missing snapshot" in capsys.readouterr().err
