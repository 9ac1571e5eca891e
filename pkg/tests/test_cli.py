import json
import logging
import os

import pytest
import yaml
from click.testing import CliRunner

from main import cli


@pytest.fixture
def runner():
    root = logging.getLogger()
    saved = (root.handlers[:], root.level)
    yield CliRunner()
    root.handlers[:], level = saved
    root.setLevel(level)


@pytest.fixture
def config(data_dir):
    return os.path.join(data_dir, "experiment.yaml")


def _load(path):
    with open(path) as fh:
        return json.load(fh)


def test_bargain_with_published_costs(runner, tmp_path):
    result = runner.invoke(cli, ["bargain", "--fixture", "W1", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    doc = _load(os.path.join(tmp_path, "bargain.json"))
    assert doc["allocation"]["epsilon"] == pytest.approx(14.83, abs=1e-2)
    assert doc["allocation"]["users"]["1"]["J"] == pytest.approx(-76.16, abs=1e-2)
    assert doc["solo_bounds"]["2"] == pytest.approx(0.1233, abs=1e-3)
    assert "bargaining successful" in result.output


def test_bargain_failure_exit_code(runner, tmp_path):
    result = runner.invoke(cli, ["bargain", "--fixture", "W1", "--gamma", "0,0.2,0,0", "--out", str(tmp_path)])
    assert result.exit_code == 4
    assert _load(os.path.join(tmp_path, "bargain.json"))["allocation"]["success"] is False


def test_bargain_d_vector_and_lattice(runner, tmp_path):
    args = ["bargain", "--d-vector=-61.33,481.18,101.48,-23.34", "--jsoc", "438.68",
            "--lattice-step", "0.25", "--out", str(tmp_path)]
    result = runner.invoke(cli, args)
    assert result.exit_code == 0, result.output
    assert os.path.isfile(os.path.join(tmp_path, "success_lattice_honest1.csv"))
    assert os.path.isfile(os.path.join(tmp_path, "manipulation_lattice_honest4.csv"))


@pytest.mark.parametrize("args", [
    ["bargain", "--d-vector", "1,2,3"],
    ["bargain", "--fixture", "W1", "--gamma", "0,-0.1,0,0"],
    ["bargain", "--d-vector", "1,two", "--jsoc", "1"],
    ["region", "--fixture", "W1", "--honest", "9", "--samples", "10"],
])
def test_validation_exit_code(runner, tmp_path, args):
    result = runner.invoke(cli, args + ["--out", str(tmp_path)])
    assert result.exit_code == 2
    assert "error" in result.output


def test_missing_config_file(runner, tmp_path):
    result = runner.invoke(cli, ["forecast", "--config", os.path.join(tmp_path, "nope.yaml")])
    assert result.exit_code == 2


def test_region_command(runner, tmp_path):
    result = runner.invoke(cli, ["region", "--fixture", "W1", "--honest", "2", "--samples", "200000",
                                 "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    doc = _load(os.path.join(tmp_path, "region.json"))
    assert doc["honest"] == ["2"]
    assert doc["probabilities"]["bargaining-fails"]["p"] == pytest.approx(0.814, abs=6e-3)


def test_forecast_command(runner, config, tmp_path):
    result = runner.invoke(cli, ["forecast", "--config", config, "--case", "W2", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    for uid in ("1", "3", "4"):
        assert os.path.isfile(os.path.join(tmp_path, f"forecast_user{uid}.csv"))


def test_schedule_command(runner, config, tmp_path):
    result = runner.invoke(cli, ["schedule", "--config", config, "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    doc = _load(os.path.join(tmp_path, "schedule.json"))
    assert max(doc["schedule"]["residuals"].values()) <= 1e-6
    assert os.path.isfile(os.path.join(tmp_path, "schedule.csv"))


def test_report_is_reproducible(runner, config, tmp_path):
    outputs = []
    for name in ("a", "b"):
        out = os.path.join(tmp_path, name)
        result = runner.invoke(cli, ["report", "--config", config, "--samples", "5000", "--out", out])
        assert result.exit_code == 0, result.output
        with open(os.path.join(out, "report.json"), "rb") as fh:
            outputs.append(fh.read())
        assert os.path.isfile(os.path.join(out, "timings.json"))
    assert outputs[0] == outputs[1]
    doc = json.loads(outputs[0])
    D_sum = sum(doc["ideal_costs"].values())
    assert D_sum >= doc["schedule"]["social_cost"] - 1e-6
    assert set(doc["regions"]) == {"1", "2", "3", "4"}
    assert sum(u["J"] for u in doc["allocation"]["users"].values()) == pytest.approx(doc["allocation"]["J_soc"])
    distributed = doc["distributed_allocation"]["J"]
    for uid, u in doc["allocation"]["users"].items():
        assert distributed[uid] == pytest.approx(u["J"], abs=1e-6)


def test_report_all_cases(runner, config, tmp_path):
    result = runner.invoke(cli, ["report", "--config", config, "--case", "all", "--samples", "1000",
                                 "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    for case in ("W1", "W2"):
        assert _load(os.path.join(tmp_path, case, "report.json"))["case"] == case


def test_report_with_stalled_distributed_solver_exits_3(runner, data_dir, tmp_path):
    path = os.path.join(tmp_path, "experiment.yaml")
    with open(path, "w") as fh:
        yaml.safe_dump({
            "model": os.path.join(data_dir, "model.yaml"),
            "pools": {uid: os.path.join(data_dir, name) for uid, name in
                      [("1", "pool_pv_user1.csv"), ("3", "pool_wt_user3.csv"), ("4", "pool_pv_user4.csv")]},
            "codes": {"max_iter": 2},
        }, fh)
    out = os.path.join(tmp_path, "out")
    result = runner.invoke(cli, ["report", "--config", path, "--solver", "distributed", "--samples", "1000",
                                 "--out", out])
    assert result.exit_code == 3, result.output
    assert "codes stopped after 2 iterations" in result.output
    assert _load(os.path.join(out, "report.json"))["schedule"]["codes"]["converged"] is False


@pytest.mark.slow
def test_distributed_schedule_command(runner, config, tmp_path):
    log = os.path.join(tmp_path, "messages.jsonl")
    result = runner.invoke(cli, ["schedule", "--config", config, "--solver", "distributed", "--verify-oracle",
                                 "--message-log", log, "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    doc = _load(os.path.join(tmp_path, "schedule.json"))["schedule"]
    assert doc["oracle_gap"] <= max(0.1, 1e-3 * doc["social_cost"])
    assert os.path.getsize(log) > 0
