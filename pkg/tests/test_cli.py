import csv
import json
import subprocess
import sys

import pytest

from hhklab.cli import main, run

MARKET = {"r": 0.02, "lambda": 0.1, "theta": 0.5, "T": 1.0}


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def lump_cfg(**extra):
    cfg = {"market": MARKET, "kernel": {"eta": 0.1, "beta": 0.5},
           "aggregator": {"name": "time_additive", "params": {"delta": 0.9, "rho": 0.5}},
           "grid": {"n_steps": 8}, "policy": {"variant": "AllAtZero", "w": 1.0}, "w": 1.0,
           "assertions": {"foc_pass": True}}
    cfg.update(extra)
    return cfg


def test_moment_check(tmp_path):
    cfg = {"market": MARKET, "moment": {"p": 2, "n_samples": 100000}}
    assert run("moment-check", write(tmp_path, cfg), str(tmp_path / "o")) == 0
    rep = json.loads((tmp_path / "o" / "moment_report.json").read_text())
    assert rep["closed_form"] == pytest.approx(1.025854, abs=1e-6)
    assert rep["within_3se"]


def test_simulate_all_at_zero_passes(tmp_path):
    out = tmp_path / "o"
    assert run("simulate", write(tmp_path, lump_cfg()), str(out)) == 0
    rep = json.loads((out / "foc_report.json").read_text())
    assert rep["pass"] is True
    for f in ("nodes.csv", "plan.csv", "resolved_config.json"):
        assert (out / f).exists()
    with open(out / "nodes.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 ** 9 - 1 and set(rows[0]) == {"step", "jump_pattern", "Y", "U", "psi_bar"}


def test_simulate_is_deterministic(tmp_path):
    cfg = write(tmp_path, lump_cfg(policy={"variant": "Barrier", "calibrate_w": 1.0}))
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("simulate", cfg, str(a), seed=3) == run("simulate", cfg, str(b), seed=3)
    for f in ("nodes.csv", "plan.csv", "calibration.json", "foc_report.json",
              "resolved_config.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_overrides_recorded(tmp_path):
    out = tmp_path / "o"
    run("simulate", write(tmp_path, lump_cfg()), str(out), seed=11, n_steps=5)
    res = json.loads((out / "resolved_config.json").read_text())
    assert res["seed"] == 11 and res["grid"]["n_steps"] == 5


def test_check_foc_zero_plan_and_file(tmp_path):
    cfg = lump_cfg(policy={"variant": "AllAtZero", "w": 0.0}, w=0.0)
    out = tmp_path / "z"
    assert run("simulate", write(tmp_path, cfg), str(out)) == 0
    cfg["plan_file"] = str(out / "plan.csv")
    assert run("check-foc", write(tmp_path, cfg, "c.json"), str(tmp_path / "c")) == 0


def test_check_foc_failure_exit_1(tmp_path):
    # lump-at-zero is not optimal when the regime operator is positive
    cfg = lump_cfg(aggregator={"name": "time_additive", "params": {"delta": 0.05, "rho": 0.5}},
                   kernel={"eta": 0.1, "beta": 1.0}, market=dict(MARKET, T=4.0))
    out = tmp_path / "s"
    cfg["assertions"] = {}
    assert run("simulate", write(tmp_path, cfg), str(out)) == 0
    cfg["plan_file"] = str(out / "plan.csv")
    code = run("check-foc", write(tmp_path, cfg, "c.json"), str(tmp_path / "c"))
    assert code == 1
    err = json.loads((tmp_path / "c" / "error.json").read_text())
    assert err["exit_code"] == 1 and err["error"] == "assertion_failed"


def test_calibrate_and_converge(tmp_path):
    cfg = lump_cfg(policy={"variant": "Barrier", "M": 0.05},
                   aggregator={"name": "time_additive", "params": {"delta": 0.05, "rho": 0.5}},
                   kernel={"eta": 1.0, "beta": 1.0})
    out = tmp_path / "cal"
    assert run("calibrate", write(tmp_path, cfg), str(out)) == 0
    cal = json.loads((out / "calibration.json").read_text())
    assert abs(cal["budget"] - 1.0) <= 1e-6
    conv = {"market": dict(MARKET, **{"lambda": 0.0}), "kernel": {"eta": 1.0, "beta": 0.5},
            "aggregator": {"name": "separable_power", "params": {"delta": 0.9, "exponent": 0.5}},
            "converge": {"n_list": [8, 10, 12, 14, 16]}, "assertions": {"order_min": 0.9}}
    assert run("converge", write(tmp_path, conv, "v.json"), str(tmp_path / "cv")) == 0
    with open(tmp_path / "cv" / "convergence.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 5


def test_validate_aggregator(tmp_path):
    cfg = {"aggregator": {"name": "time_additive", "params": {"delta": 0.05, "rho": 0.5}},
           "validate": {"K": 0.05, "growth_alpha": 0.49, "p": 1.01, "t_range": [0, 1],
                        "y_range": [0.01, 1.0], "u_range": [-2, 2]},
           "assertions": {"a1_pass": True}}
    assert run("validate-aggregator", write(tmp_path, cfg), str(tmp_path / "o")) == 0


def test_validation_errors_exit_2(tmp_path):
    cfg = lump_cfg()
    bad = dict(cfg, market={"r": 0.02, "theta": 0.5, "T": 1.0})
    assert run("simulate", write(tmp_path, bad), str(tmp_path / "o")) == 2
    err = json.loads((tmp_path / "o" / "error.json").read_text())
    assert "lambda" in err["message"]
    bad = dict(cfg, market=dict(MARKET, **{"lambda": 50.0}))
    assert run("simulate", write(tmp_path, bad, "b.json"), str(tmp_path / "p")) == 2
    assert run("simulate", str(tmp_path / "missing.json"), str(tmp_path / "q")) == 2
    bad = dict(cfg, aggregator={"name": "nope"})
    assert run("simulate", write(tmp_path, bad, "c.json"), str(tmp_path / "r")) == 2


def test_main_entry_point(tmp_path):
    cfg = write(tmp_path, {"market": MARKET, "moment": {"p": 2, "n_samples": 1000}})
    assert main(["moment-check", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "1"]) == 0
    r = subprocess.run([sys.executable, "-m", "hhklab.cli", "moment-check", "--config", cfg,
                        "--out", str(tmp_path / "p")], capture_output=True, text=True)
    assert r.returncode == 0 and "closed_form" in r.stdout
