import json

import pytest

from hiddenprox import read_csv
from hiddenprox.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main


def test_simulate_is_reproducible(tmp_path):
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for p in paths:
        assert main(["simulate", "--dgp", "mixed", "--n", "50", "--seed", "7", "--out", str(p)]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    header = paths[0].read_text().splitlines()[0]
    assert header.startswith("# ")
    assert json.loads(header[2:])["seed"] == 7
    assert len(read_csv(paths[0])) == 50


def test_simulate_to_stdout(capsys):
    assert main(["simulate", "--n", "4", "--observed"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[1] == "a,c,w,z,v"
    assert len(lines) == 6


def test_missing_config_file(tmp_path, capsys):
    path = tmp_path / "nope.json"
    assert main(["estimate", "--config", str(path)]) == EXIT_CONFIG
    assert str(path) in capsys.readouterr().err


def test_unknown_flag_and_config_key(tmp_path, capsys):
    assert main(["estimate", "--bogus", "1"]) == EXIT_CONFIG
    assert "error: ConfigError" in capsys.readouterr().err
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"sample_size": 10}))
    assert main(["estimate", "--config", str(cfg)]) == EXIT_CONFIG
    assert main(["study", "--config", str(cfg)]) == EXIT_CONFIG


def test_numerical_failure_exit_code(capsys):
    assert main(["estimate", "--dgp", "mixed", "--n", "30", "--folds", "2"]) == EXIT_NUMERIC
    assert "InsufficientDataError" in capsys.readouterr().err


def test_estimate_writes_json(tmp_path):
    data = tmp_path / "d.csv"
    out = tmp_path / "run.json"
    main(["simulate", "--n", "2000", "--seed", "4", "--out", str(data)])
    assert main(["estimate", "--data", str(data), "--method", "oracle", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["kind"] == "oracle"
    assert doc["config"]["data"] == str(data)
    assert "dgp" not in doc["config"]
    assert doc["ciLow"] < doc["ate"] < doc["ciHigh"]


def test_oracle_needs_hidden_outcome(tmp_path):
    data = tmp_path / "d.csv"
    main(["simulate", "--n", "200", "--observed", "--out", str(data)])
    assert main(["estimate", "--data", str(data), "--method", "oracle"]) == EXIT_CONFIG


@pytest.mark.parametrize("dgp", ["binary", "mixed"])
def test_recover_embeds_config(tmp_path, dgp):
    out = tmp_path / "laws.json"
    assert main(["recover", "--dgp", dgp, "--n", "3000", "--seed", "2", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["config"]["dgp"] == dgp
    assert doc["config"]["seed"] == 2


def test_seed_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "n": 30}))
    out = tmp_path / "x.csv"

    def seed_used(*extra):
        main(["simulate", "--config", str(cfg), "--out", str(out), *extra])
        return json.loads(out.read_text().splitlines()[0][2:])["seed"]

    assert seed_used() == 1
    monkeypatch.setenv("PROXI_SEED", "5")
    assert seed_used() == 5
    assert seed_used("--seed", "9") == 9
    monkeypatch.setenv("PROXI_SEED", "five")
    assert main(["simulate", "--config", str(cfg)]) == EXIT_CONFIG


def test_study_command(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("PROXI_SEED", "300")
    out = tmp_path / "study"
    code = main(["study", "--dgp", "binary", "--n", "300", "--reps", "4", "--method", "naive",
                 "oracle", "--out", str(out)])
    assert code == EXIT_OK
    assert "true ate" in capsys.readouterr().out
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["base_seed"] == 300
    assert manifest["config"]["methods"] == ["naive", "oracle"]
    assert (out / "raw.csv").exists() and (out / "summary.csv").exists()


def test_robustness_command(tmp_path, capsys):
    out = tmp_path / "rob"
    assert main(["robustness", "--n", "1000", "--reps", "2", "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "doubly-violated" in text
    assert len((out / "robustness.csv").read_text().splitlines()) == 9
