import json

import pytest

from ml_smoother import cli
from ml_smoother.oracles import (
    OracleCheck,
    OracleReport,
    check_config_rejection,
    check_model_derivatives,
    run_oracle_suite,
)


def test_bad_config_exits_2(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"run": {"M": 0}}))
    assert cli.main(["linear", "--config", str(path)]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_unknown_preset_exits_2(tmp_path):
    assert cli.main(["simulate", "--preset", "nope", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_simulate_writes_trajectory(tmp_path, capsys):
    code = cli.main(["simulate", "--horizon", "5", "--seed", "3", "--out", str(tmp_path)])
    assert code == cli.EXIT_OK
    lines = (tmp_path / "trajectory.csv").read_text().splitlines()
    assert lines[0] == "k,x[0],x[1],x[2],y[0]"
    assert len(lines) == 7
    assert "trajectory.csv" in capsys.readouterr().out


def test_flags_become_overrides():
    args = cli.build_parser().parse_args(
        ["nonlinear", "--particles", "300", "--replicates", "5", "--scheme", "bhhh", "--horizon", "12"]
    )
    cfg = cli.resolve_config(args)
    assert cfg.model.kind.value == "tanh"
    assert (cfg.run.M, cfg.run.N, cfg.run.n) == (300, 5, 12)
    assert cfg.iteration.scheme.value == "bhhh"


def test_linear_small_run(tmp_path, capsys):
    code = cli.main(
        ["linear", "--horizon", "4", "--particles", "150", "--replicates", "2", "--out", str(tmp_path)]
    )
    assert code == cli.EXIT_OK
    assert (tmp_path / "table.csv").exists()
    assert (tmp_path / "report.json").exists()
    assert "coverage" in capsys.readouterr().out


def test_check_writes_report(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "run_oracle_suite", _subset_suite)
    assert cli.main(["check", "--out", str(tmp_path)]) == cli.EXIT_OK
    data = json.loads((tmp_path / "oracles.json").read_text())
    assert all(c["passed"] for c in data["checks"])


def test_check_failure_exits_1(tmp_path, monkeypatch, capsys):
    def failing(cfg):
        return OracleReport(checks=[OracleCheck(name="demo", passed=False, value=1.0, tolerance=0.0)])

    monkeypatch.setattr(cli, "run_oracle_suite", failing)
    assert cli.main(["check", "--out", str(tmp_path)]) == cli.EXIT_FAILURE
    assert "demo" in capsys.readouterr().err


def _subset_suite(cfg):
    return run_oracle_suite(cfg, checks=(check_config_rejection, check_model_derivatives))


def test_command_required():
    with pytest.raises(SystemExit):
        cli.main([])
