import json

import numpy as np
import pytest
from click.testing import CliRunner

from haarstab.cli import cli
from haarstab.faithful import FaithfulHaarSystem, validate
from haarstab.multipliers import SeededMultiplier, capon, multiplier_from_json
from haarstab.rng import SEED_ENV
from haarstab.spaces import HaarCoefficients2D
from haarstab.stabilizer import EtaSchedule, check_conditions


@pytest.fixture
def runner():
    return CliRunner()


def write(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return str(path)


def test_selftest_passes(runner):
    res = runner.invoke(cli, ["selftest"])
    assert res.exit_code == 0
    assert json.loads(res.output)["pass"] is True


def test_lambda_mu_on_capon(runner, tmp_path):
    f = write(tmp_path / "capon.json", capon(10, 10).to_json())
    res = runner.invoke(cli, ["lambda-mu", "--multiplier", f, "--lo", "2", "--hi", "9"])
    assert res.exit_code == 0
    assert json.loads(res.output) == {"lambda": 1.0, "mu": 0.0, "converged": True}


def test_lambda_mu_not_converged_exits_1(runner, tmp_path):
    f = write(tmp_path / "d.json", SeededMultiplier(1, 1.0, 8, 8).to_json())
    res = runner.invoke(cli, ["lambda-mu", "--multiplier", f, "--lo", "2", "--hi", "8"])
    assert res.exit_code == 1 and json.loads(res.output)["converged"] is False


def test_probe_capon_ratios_increase_and_csv(runner, tmp_path):
    out = tmp_path / "probe.csv"
    res = runner.invoke(
        cli,
        ["probe-capon", "--family", "l1-row", "--space", "s00:L1:L2", "--n", "1..6", "--expect", "growth", "--csv", str(out)],
    )
    assert res.exit_code == 0
    ratios = [r["ratio"] for r in json.loads(res.output)["ratios"]]
    assert all(b > a for a, b in zip(ratios, ratios[1:]))
    raw = out.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode("utf-8").splitlines()
    assert lines[0].startswith("n,caponNorm,norm,ratio") and len(lines) == 7


def test_probe_capon_bounded_expectation_fails_on_growth(runner):
    res = runner.invoke(cli, ["probe-capon", "--family", "l1-row", "--space", "s00:L1:L2", "--n", "1..6", "--expect", "bounded"])
    assert res.exit_code == 1


@pytest.mark.parametrize(
    "args",
    [
        ["probe-capon", "--family", "l1-row", "--space", "s00:L1:L2", "--n", "6..1"],
        ["probe-capon", "--family", "l1-row", "--space", "s99:L1:L2"],
        ["lambda-mu", "--multiplier", "missing.json", "--lo", "1", "--hi", "2"],
        ["frobnicate"],
    ],
)
def test_usage_errors_exit_2(runner, args):
    assert runner.invoke(cli, args).exit_code == 2


def test_malformed_json_reports_line(runner, tmp_path):
    f = tmp_path / "bad.json"
    f.write_text('{\n  "kind": "dense",\n  "maxLevelFirst": 2,,\n}\n', encoding="utf-8")
    res = runner.invoke(cli, ["variation", "--multiplier", str(f)])
    assert res.exit_code == 2 and "line 3" in res.output


def test_malformed_schema_reports_field(runner, tmp_path):
    f = write(tmp_path / "bad.json", {"kind": "level", "maxLevelFirst": 3, "maxLevelSecond": 3})
    res = runner.invoke(cli, ["variation", "--multiplier", f])
    assert res.exit_code == 2 and "matrix" in res.output


def test_norm_and_seed_override(runner, tmp_path, monkeypatch):
    rng = np.random.default_rng(0)
    z = HaarCoefficients2D(3, 3, rng.integers(1, 16, 24), rng.integers(1, 16, 24), rng.standard_normal(24))
    f = write(tmp_path / "z.json", z.to_json())
    args = ["norm", "--vector", f, "--space", "s11:L1:L1", "--method", "monte-carlo", "--samples", "200"]
    monkeypatch.delenv(SEED_ENV, raising=False)
    a = json.loads(runner.invoke(cli, args + ["--seed", "5"]).output)
    monkeypatch.setenv(SEED_ENV, "5")
    b = json.loads(runner.invoke(cli, args + ["--seed", "9"]).output)
    assert a == b and a["method"] == "monte-carlo"
    monkeypatch.delenv(SEED_ENV)
    exact = runner.invoke(cli, ["norm", "--vector", f, "--space", "s00:L2:L2"])
    assert exact.exit_code == 0 and json.loads(exact.output)["stdError"] == 0.0


def test_stabilize_artifacts_round_trip(runner, tmp_path):
    f = write(tmp_path / "d.json", SeededMultiplier(4, 1.0, 16, 16).to_json())
    out = tmp_path / "out"
    res = runner.invoke(cli, ["stabilize", "--multiplier", f, "--seed", "4", "--out-dir", str(out)])
    assert res.exit_code == 0
    payload = json.loads(res.output)
    assert payload["pass"] is True
    H = FaithfulHaarSystem.from_json(json.loads((out / "H.json").read_text()))
    K = FaithfulHaarSystem.from_json(json.loads((out / "K.json").read_text()))
    assert validate(H) == [] and validate(K) == []
    Dt = multiplier_from_json(json.loads((out / "Dtilde.json").read_text()))
    rep = check_conditions(Dt, EtaSchedule.flat(0.25), 0.2, 2)
    assert rep.to_json() == payload["report"]
    again = runner.invoke(cli, ["stabilize", "--multiplier", f, "--seed", "4"])
    assert json.loads(again.output) == payload


def test_stabilize_budget_failure_exits_1(runner, tmp_path):
    f = write(tmp_path / "d.json", SeededMultiplier(4, 1.0, 16, 16).to_json())
    res = runner.invoke(cli, ["stabilize", "--multiplier", f, "--depth", "3", "--budget", "7"])
    assert res.exit_code == 1 and json.loads(res.output)["stage"] == "triangular"


def test_check_factor_on_capon(runner, tmp_path):
    f = write(tmp_path / "c.json", capon(16, 16).to_json())
    res = runner.invoke(cli, ["check-factor", "--multiplier", f, "--trials", "3"])
    assert res.exit_code == 0
    out = json.loads(res.output)
    assert out["lambda"] == 1.0 and out["mu"] == 0.0 and out["maxEmpiricalRatio"] == 0.0
