import json

import pytest

from ewall.cli import main


SMALL = {"k": 2, "d": 3, "t": 4, "m": 10, "n_mh": 2, "n_reps": 2}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def _error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


@pytest.mark.parametrize("command,files", [
    ("generate", ["data.csv", "truth.json"]),
    ("run-finite", ["posterior.csv", "result.csv"]),
    ("run-dictionary", ["result.csv", "chain.csv"]),
    ("run-ltl", ["ltl.json"]),
    ("run-tl", ["posterior.csv"]),
    ("bounds", ["bounds.csv"]),
    ("figure2", ["result.csv", "plot.csv", "plot.json", "truth.json"]),
])
def test_commands_write_outputs(tmp_path, config, command, files):
    out = tmp_path / "out"
    out.mkdir()
    assert main([command, "--seed", "1", "--config", config, "--out", str(out)]) == 0
    for name in files:
        assert (out / name).exists(), name


def test_result_csv_header(tmp_path, config):
    assert main(["figure2", "--config", config, "--out", str(tmp_path)]) == 0
    header = (tmp_path / "result.csv").read_text().splitlines()[0]
    assert header == "task,round,loss_ewall,cumloss_ewall,loss_oracle,cumloss_oracle"


def test_run_from_generated_data(tmp_path, config):
    assert main(["generate", "--config", config, "--out", str(tmp_path)]) == 0
    data, truth = str(tmp_path / "data.csv"), str(tmp_path / "truth.json")
    assert main(["run-finite", "--config", config, "--out", str(tmp_path),
                 "--data", data, "--truth", truth]) == 0
    assert main(["run-dictionary", "--config", config, "--out", str(tmp_path),
                 "--data", data]) == 0


def test_bounds_prints_aligned_text(tmp_path, config, capsys):
    assert main(["bounds", "--config", config, "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    names = [ln.split()[0] for ln in lines]
    assert "eta_finite" in names and "theorem3_rate.total" in names
    assert len({ln.index(ln.split()[1], len(ln.split()[0])) for ln in lines}) == 1


def test_same_seed_same_output(tmp_path, config):
    for sub in ("a", "b"):
        (tmp_path / sub).mkdir()
        assert main(["figure2", "--seed", "3", "--config", config,
                     "--out", str(tmp_path / sub)]) == 0
    assert (tmp_path / "a" / "result.csv").read_bytes() == \
        (tmp_path / "b" / "result.csv").read_bytes()


def test_unknown_config_key(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"k": 2, "bogus": 1}))
    assert main(["generate", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert _error(capsys)["error"] == "InputError"


def test_malformed_config(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["generate", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "message" in _error(capsys)


def test_missing_data_file(tmp_path, config, capsys):
    code = main(["run-dictionary", "--config", config, "--out", str(tmp_path),
                 "--data", str(tmp_path / "nope.csv")])
    assert code != 0
    _error(capsys)


def test_usage_error(capsys):
    assert main(["no-such-command"]) == 2
    assert _error(capsys)["error"] == "UsageError"


def test_negative_seed(tmp_path, capsys):
    assert main(["generate", "--seed", "-1", "--out", str(tmp_path)]) == 2
    _error(capsys)
