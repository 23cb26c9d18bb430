"""Command line scenario runner.

Usage::

    hhklab SUBCOMMAND --config PATH --out DIR [--seed N] [--n-steps N]

Subcommands are ``simulate``, ``check-foc``, ``calibrate``,
``validate-aggregator``, ``converge`` and ``moment-check``. Exit code 0 means
every configured assertion passed, 1 an assertion failed and 2 the config or
an input was invalid; in the last two cases ``error.json`` is written.

Config (JSON). Economic parameters have no defaults:

``market``
    ``r`` (interest rate, 1/year), ``lambda`` (jump intensity, 1/year),
    ``theta`` (log jump of the state-price density), ``T`` (horizon, years).
``kernel``
    ``eta`` (initial satisfaction, consumption units), ``beta`` (1/year).
``aggregator``
    ``name`` in ``epstein_zin`` (``delta``, ``alpha``, ``rho``),
    ``time_additive`` (``delta``, ``rho``) or ``separable_power``
    (``delta``, ``exponent``).
``grid``
    ``n_steps``.
``policy``
    ``variant`` in ``AllAtZero`` (``w``), ``Barrier`` / ``TimeAdditiveBarrier``
    (``M``); with ``calibrate_w`` the parameter is calibrated to that budget.

Optional keys: ``seed``, ``tolerances`` (``budget``, ``violation``,
``flatoff``), ``solver`` (``scheme``, ``tol``, ``max_iter``), ``assertions``
(``foc_pass``, ``max_violation``, ``order_min``), ``plan_file``, ``M``, ``w``,
``converge`` (``n_list``, ``plan``, ``oracle_substeps``), ``moment``
(``p``, ``n_samples``), ``validate`` (``K``, ``growth_alpha``, ``p``,
``t_range``, ``y_range``, ``u_range``, ``n_points``).
"""

import argparse
import copy
import csv
import json
import math
import os
import sys

import numpy as np

from .aggregators import (AggregatorDomainError, AssumptionProfile, EZParams, SampleGrid,
                          TimeAdditiveParams, derivative_check, make_epstein_zin,
                          make_separable, make_time_additive, power_felicity, validate_a1)
from .bsde import SolverConfig, SolverError, dump_nodes, refine_study, solve_deterministic
from .foc import check_foc, evaluate, solve_multiplier
from .market_tree import MarketParams, TimeGrid, TreeError, budget, build_tree, density_moment
from .plans import ConsumptionPlan, PlanError, SatisfactionKernel
from .policies import PolicySpec, all_at_zero, barrier_policy, build_policy, calibrate

SUBCOMMANDS = ("simulate", "check-foc", "calibrate", "validate-aggregator", "converge",
               "moment-check")
DEFAULT_TOLERANCES = {"budget": 1e-6, "violation": 1e-3, "flatoff": 1e-4}


class ConfigError(ValueError):
    """Missing or invalid configuration entry."""


class AssertionFailure(Exception):
    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


def _need(d, key, where):
    if not isinstance(d, dict) or key not in d:
        raise ConfigError(f"missing required key {where}.{key}")
    return d[key]


def _num(d, key, where):
    v = _need(d, key, where)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}.{key} must be a number, got {v!r}")
    return float(v)


def load_config(path, seed=None, n_steps=None):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
    if n_steps is not None:
        cfg.setdefault("grid", {})["n_steps"] = int(n_steps)
    cfg.setdefault("seed", 0)
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(cfg.get("tolerances", {}))
    cfg["tolerances"] = tol
    sol = {"scheme": "implicit", "tol": 1e-12, "max_iter": 100}
    sol.update(cfg.get("solver", {}))
    cfg["solver"] = sol
    return cfg


def market_from(cfg):
    m = _need(cfg, "market", "config")
    return MarketParams(r=_num(m, "r", "market"), lam=_num(m, "lambda", "market"),
                        theta=_num(m, "theta", "market"), T=_num(m, "T", "market"))


def kernel_from(cfg):
    k = _need(cfg, "kernel", "config")
    return SatisfactionKernel(eta=_num(k, "eta", "kernel"), beta=_num(k, "beta", "kernel"))


def aggregator_from(cfg):
    a = _need(cfg, "aggregator", "config")
    name = _need(a, "name", "aggregator")
    p = a.get("params", {})
    if name == "epstein_zin":
        return make_epstein_zin(EZParams(_num(p, "delta", "aggregator.params"),
                                         _num(p, "alpha", "aggregator.params"),
                                         _num(p, "rho", "aggregator.params")))
    if name == "time_additive":
        return make_time_additive(TimeAdditiveParams(_num(p, "delta", "aggregator.params"),
                                                     _num(p, "rho", "aggregator.params")))
    if name == "separable_power":
        g, dg, d2g, dtg = power_felicity(_num(p, "exponent", "aggregator.params"))
        return make_separable(g, _num(p, "delta", "aggregator.params"), dg, d2g, dtg,
                              name="separable_power")
    raise ConfigError(f"unknown aggregator {name!r}")


def solver_from(cfg):
    s = cfg["solver"]
    return SolverConfig(scheme=s["scheme"], tol=float(s["tol"]), max_iter=int(s["max_iter"]))


def tree_from(cfg, n_steps=None):
    market = market_from(cfg)
    g = _need(cfg, "grid", "config")
    n = int(n_steps if n_steps is not None else _need(g, "n_steps", "grid"))
    return market, build_tree(market, TimeGrid(n, market.T))


def _tolerances(cfg):
    t = cfg["tolerances"]
    return (float(t["budget"]), float(t["violation"]), float(t["flatoff"]))


# ---------------------------------------------------------------------------
# output helpers

def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_clean(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands

def _build_plan(cfg, tree, market, spec, kernel, solver):
    """Plan and multiplier from the policy section; calibrates when asked."""
    pol = _need(cfg, "policy", "config")
    variant = _need(pol, "variant", "policy")
    target = pol.get("calibrate_w")
    calib = None
    if variant == "AllAtZero":
        if target is not None:
            calib = calibrate(tree, lambda x: all_at_zero(tree, x), float(target),
                              tol=cfg["tolerances"]["budget"], decreasing=False,
                              x0=max(float(target), 1e-12))
            plan = calib.plan
        else:
            plan = build_policy(tree, PolicySpec("AllAtZero", w=_num(pol, "w", "policy")),
                                spec, market, kernel, solver)
        M = solve_multiplier(tree, plan, spec, kernel, solver)[0] if np.any(plan.support) else None
        return plan, M, calib
    if variant in ("Barrier", "TimeAdditiveBarrier"):
        if target is not None:
            x0 = float(pol.get("M", 1.0))
            calib = calibrate(tree, lambda M: barrier_policy(tree, spec, market, kernel, M,
                                                             solver)[0],
                              float(target), tol=cfg["tolerances"]["budget"], x0=x0)
            return calib.plan, calib.param, calib
        M = _num(pol, "M", "policy")
        plan = build_policy(tree, PolicySpec(variant, M=M), spec, market, kernel, solver)
        return plan, M, None
    raise ConfigError(f"policy variant {variant!r} is not runnable from a config")


def _foc_assertions(cfg, report):
    a = cfg.get("assertions", {})
    if a.get("foc_pass") and not report.passed:
        raise AssertionFailure("FOC report does not pass", report.to_dict())
    if "max_violation" in a and report.max_violation > float(a["max_violation"]):
        raise AssertionFailure("max_violation above the configured bound", report.to_dict())


def cmd_simulate(cfg, out):
    market, tree = tree_from(cfg)
    kernel = kernel_from(cfg)
    spec = aggregator_from(cfg)
    solver = solver_from(cfg)
    plan, M, calib = _build_plan(cfg, tree, market, spec, kernel, solver)
    ev = evaluate(tree, plan, spec, kernel, solver)
    dump_nodes(os.path.join(out, "nodes.csv"), tree, ev.Y, ev.U, ev.psi_bar)
    plan.to_csv(os.path.join(out, "plan.csv"))
    b = budget(tree, plan)
    w = float(cfg.get("w", b))
    summary = {"U0": float(ev.U[0]), "budget": b, "M": M}
    if calib is not None:
        write_json(os.path.join(out, "calibration.json"), calib.to_dict())
    if M is not None:
        rep = check_foc(tree, plan, M, w, spec, kernel, market, _tolerances(cfg), solver, ev=ev)
        write_json(os.path.join(out, "foc_report.json"), rep.to_dict())
        summary["foc_pass"] = rep.passed
        _foc_assertions(cfg, rep)
    return summary


def cmd_check_foc(cfg, out):
    market, tree = tree_from(cfg)
    kernel = kernel_from(cfg)
    spec = aggregator_from(cfg)
    solver = solver_from(cfg)
    plan = ConsumptionPlan.from_csv(_need(cfg, "plan_file", "config"))
    if plan.shape_key() != tree.shape_key():
        raise ConfigError("plan_file does not match grid.n_steps")
    w = _num(cfg, "w", "config")
    ev = evaluate(tree, plan, spec, kernel, solver)
    if "M" in cfg:
        M = _num(cfg, "M", "config")
    elif np.any(plan.support):
        M = solve_multiplier(tree, plan, spec, kernel, solver, ev=ev)[0]
    else:
        # zero plan: the smallest multiplier that satisfies the gradient constraint
        M = float(np.max(ev.nablaV / tree.psi))
        M = M if M > 0 else 1.0
    rep = check_foc(tree, plan, M, w, spec, kernel, market, _tolerances(cfg), solver, ev=ev)
    write_json(os.path.join(out, "foc_report.json"), rep.to_dict())
    if not rep.passed:
        raise AssertionFailure("FOC report does not pass", rep.to_dict())
    return {"M": M, "foc_pass": rep.passed}


def cmd_calibrate(cfg, out):
    market, tree = tree_from(cfg)
    kernel = kernel_from(cfg)
    spec = aggregator_from(cfg)
    solver = solver_from(cfg)
    pol = _need(cfg, "policy", "config")
    if "calibrate_w" not in pol:
        pol = dict(pol)
        pol["calibrate_w"] = _num(cfg, "w", "config")
        cfg = dict(cfg, policy=pol)
    plan, M, calib = _build_plan(cfg, tree, market, spec, kernel, solver)
    write_json(os.path.join(out, "calibration.json"), calib.to_dict())
    plan.to_csv(os.path.join(out, "plan.csv"))
    return calib.to_dict()


def cmd_validate(cfg, out):
    spec = aggregator_from(cfg)
    v = _need(cfg, "validate", "config")
    prof = AssumptionProfile(K=_num(v, "K", "validate"),
                             growth_alpha=_num(v, "growth_alpha", "validate"),
                             p=_num(v, "p", "validate"))
    grid = SampleGrid(tuple(_need(v, "t_range", "validate")),
                      tuple(_need(v, "y_range", "validate")),
                      tuple(_need(v, "u_range", "validate")), int(v.get("n_points", 200)))
    rep = validate_a1(spec, prof, grid, seed=int(cfg["seed"]))
    der = derivative_check(spec, seed=int(cfg["seed"]))
    res = {"a1": rep.to_dict(), "derivative_rel_err": der}
    write_json(os.path.join(out, "aggregator_report.json"), res)
    a = cfg.get("assertions", {})
    if a.get("a1_pass") and not rep.passed:
        raise AssertionFailure("validate_a1 reports a violation", res)
    return {"a1_passed": rep.passed}


def cmd_converge(cfg, out):
    market = market_from(cfg)
    kernel = kernel_from(cfg)
    spec = aggregator_from(cfg)
    solver = solver_from(cfg)
    c = _need(cfg, "converge", "config")
    n_list = [int(n) for n in _need(c, "n_list", "converge")]
    kind = c.get("plan", "zero")
    w = float(c.get("w", 0.0))
    oracle = None
    if market.lam == 0 and kind in ("zero", "all_at_zero"):
        # deterministic: Y is known in closed form, the ODE oracle applies
        y0 = kernel.eta + kernel.beta * (w if kind == "all_at_zero" else 0.0)

        def yfun(t):
            return y0 * np.exp(-kernel.beta * t)

        sub = int(c.get("oracle_substeps", 2000))
        oracle = float(solve_deterministic(np.array([0.0, market.T]), yfun, spec,
                                           substeps=sub)[0])

    def solve_at(n):
        tree = build_tree(market, TimeGrid(n, market.T))
        plan = all_at_zero(tree, w) if kind == "all_at_zero" else ConsumptionPlan.zero(tree)
        return evaluate(tree, plan, spec, kernel, solver).U[0]

    rows, order = refine_study(solve_at, n_list, oracle)
    with open(os.path.join(out, "convergence.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["n", "U0", "diff_prev", "err_oracle"])
        for r in rows:
            wr.writerow([r.n, repr(r.U0), repr(r.diff_prev), repr(r.err_oracle)])
    res = {"order": order, "oracle": oracle}
    a = cfg.get("assertions", {})
    if "order_min" in a and not order >= float(a["order_min"]):
        raise AssertionFailure(f"empirical order {order} below {a['order_min']}", res)
    return res


def cmd_moment(cfg, out):
    market = market_from(cfg)
    mo = _need(cfg, "moment", "config")
    p = _num(mo, "p", "moment")
    n = int(mo.get("n_samples", 100_000))
    closed, mean, se = density_moment(market, p, n, seed=int(cfg["seed"]))
    z = abs(mean - closed) / se if se > 0 else (0.0 if mean == closed else math.inf)
    res = {"closed_form": closed, "mc_mean": mean, "mc_stderr": se, "z": z,
           "n_samples": n, "within_3se": bool(z <= 3)}
    write_json(os.path.join(out, "moment_report.json"), res)
    if not res["within_3se"]:
        raise AssertionFailure("Monte Carlo moment outside 3 standard errors", res)
    return res


COMMANDS = {"simulate": cmd_simulate, "check-foc": cmd_check_foc, "calibrate": cmd_calibrate,
            "validate-aggregator": cmd_validate, "converge": cmd_converge,
            "moment-check": cmd_moment}

VALIDATION_ERRORS = (ConfigError, TreeError, PlanError, AggregatorDomainError, ValueError,
                     KeyError, TypeError)


def run(subcommand, config_path, out_dir, seed=None, n_steps=None):
    """Run one subcommand and return its exit code."""
    os.makedirs(out_dir, exist_ok=True)

    def fail(code, kind, exc, details=None):
        err = {"exit_code": code, "error": kind, "message": str(exc),
               "subcommand": subcommand}
        if details:
            err["details"] = details
        write_json(os.path.join(out_dir, "error.json"), err)
        print(json.dumps(_clean(err), sort_keys=True), file=sys.stderr)
        return code

    try:
        cfg = load_config(config_path, seed, n_steps)
        write_json(os.path.join(out_dir, "resolved_config.json"), cfg)
        result = COMMANDS[subcommand](cfg, out_dir)
    except AssertionFailure as exc:
        return fail(1, "assertion_failed", exc, exc.details)
    except (SolverError, RuntimeError) as exc:
        return fail(1, "solver_error", exc)
    except VALIDATION_ERRORS as exc:
        return fail(2, "validation_error", exc)
    print(json.dumps(_clean(result), sort_keys=True))
    return 0


def main(argv=None):
    ap = argparse.ArgumentParser(prog="hhklab", description=__doc__.split("\n")[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="scenario JSON")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--n-steps", type=int, default=None, help="override grid.n_steps")
    args = ap.parse_args(argv)
    return run(args.subcommand, args.config, args.out, args.seed, args.n_steps)


if __name__ == "__main__":
    sys.exit(main())
