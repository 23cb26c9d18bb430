"""Utility gradient, shadow processes and first-order condition audits.

The gradient of ``U_0`` in the direction of an extra lump at node ``k`` is
``prob_k * nablaV_k`` with

    nablaV(t) = E_t[ sum_{s >= t} D_s f_y(s, Y_s, U_s) beta e^{-beta (s - t)} delta ].

Two discount weights are available. ``"exp"`` uses ``D = exp(sum f_u delta)``.
``"adjoint"`` uses the factors ``1 / (1 - f_u delta)`` of the implicit scheme,
which makes ``nablaV`` the exact derivative of the discrete ``U_0``.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .bsde import SolverConfig, solve_utility
from .market_tree import budget as plan_budget
from .market_tree import jump_pattern, slice_bounds
from .plans import ConsumptionPlan, PlanError, satisfaction


@dataclass(frozen=True, eq=False)
class WeightField:
    D: np.ndarray = field(repr=False)


@dataclass(frozen=True, eq=False)
class GradientField:
    nablaV: np.ndarray = field(repr=False)


@dataclass(frozen=True, eq=False)
class ShadowField:
    """``F = D f_y``, ``F_tilde = nablaV X`` and ``X = e^{(r + lam (e^theta - 1)) t}``."""

    F: np.ndarray = field(repr=False)
    F_tilde: np.ndarray = field(repr=False)
    X: np.ndarray = field(repr=False)


def _step_factor(tree, Y, U, spec, weights):
    if weights not in ("exp", "adjoint"):
        raise ValueError(f"unknown weights {weights!r}")
    # leaf factors are never used; they may be singular where U_T = 0
    with np.errstate(all="ignore"):
        fu = spec.fu(tree.t, Y, U)
        fac = np.exp(fu * tree.delta) if weights == "exp" else 1.0 / (1.0 - fu * tree.delta)
    fac[tree.leaves] = 1.0
    return np.ascontiguousarray(fac)


def discount_weight(tree, Y, U, spec, weights="exp"):
    """Path product of per-step discount factors, ``D_0 = 1``."""
    fac = _step_factor(tree, Y, U, spec, weights)
    return WeightField(kernels.forward_product(fac, tree.n_steps))


def gradient(tree, Y, U, spec, kernel, weights="adjoint"):
    """Utility gradient ``nablaV`` at every node (zero on leaves)."""
    fac = _step_factor(tree, Y, U, spec, weights)
    D = kernels.forward_product(fac, tree.n_steps)
    # the adjoint weight of node j includes its own implicit factor
    w = D * fac if weights == "adjoint" else D
    with np.errstate(all="ignore"):
        fy = spec.fy(tree.t, Y, U)
    if kernel.exponential:
        src = w * fy * kernel.beta * np.exp(-kernel.beta * tree.t) * tree.delta
        src[tree.leaves] = 0.0
        G = kernels.backward_accumulate(np.ascontiguousarray(src), tree.p, tree.n_steps)
        return GradientField(np.exp(kernel.beta * tree.t) * G)
    a, b = kernel.separable_factors()
    src = w * fy * a[tree.step] * tree.delta
    src[tree.leaves] = 0.0
    G = kernels.backward_accumulate(np.ascontiguousarray(src), tree.p, tree.n_steps)
    return GradientField(b[tree.step] * G)


def shadow(tree, Y, U, spec, market, nablaV, weights="exp"):
    """Shadow processes ``F``, ``F_tilde`` and ``X``."""
    D = discount_weight(tree, Y, U, spec, weights).D
    X = np.exp(market.psi_drift * tree.t)
    return ShadowField(F=D * spec.fy(tree.t, Y, U), F_tilde=nablaV * X, X=X)


@dataclass
class Evaluation:
    """Satisfaction, utility and gradient of one plan."""

    Y: np.ndarray = field(repr=False)
    U: np.ndarray = field(repr=False)
    psi_bar: np.ndarray = field(repr=False)
    nablaV: np.ndarray = field(repr=False)


def evaluate(tree, plan, spec, kernel, config=SolverConfig(), weights="adjoint"):
    Y = satisfaction(tree, plan, kernel)
    uf, jf = solve_utility(tree, Y, spec, config)
    g = gradient(tree, Y, uf.U, spec, kernel, weights)
    return Evaluation(Y=Y, U=uf.U, psi_bar=jf.psi_bar, nablaV=g.nablaV)


def gradient_fd(tree, plan, spec, kernel, node=0, eps_list=(1e-4, 5e-5),
                config=SolverConfig(), weights="adjoint"):
    """Finite-difference slope of ``U_0`` along an extra lump at ``node``.

    The last two step sizes are combined by Richardson extrapolation. The
    slope is compared with ``prob_node * nablaV_node``.

    Returns
    -------
    dict
        ``eps``, ``slopes``, ``extrapolated``, ``gradient`` and ``rel_err``.
    """
    base = evaluate(tree, plan, spec, kernel, config, weights)
    slopes = []
    for eps in eps_list:
        lump = plan.lump.copy()
        lump[node] += eps
        Yp = satisfaction(tree, ConsumptionPlan(plan.n_steps, lump, plan.rate), kernel)
        Up, _ = solve_utility(tree, Yp, spec, config)
        slopes.append((Up.U0 - base.U[0]) / eps)
    if len(eps_list) >= 2:
        e1, e2 = eps_list[-2], eps_list[-1]
        s1, s2 = slopes[-2], slopes[-1]
        extra = (e1 * s2 - e2 * s1) / (e1 - e2)
    else:
        extra = slopes[-1]
    grad = float(tree.prob[node] * base.nablaV[node])
    rel = abs(extra - grad) / abs(grad) if grad != 0 else abs(extra)
    return {"node": int(node), "eps": list(map(float, eps_list)), "slopes": slopes,
            "extrapolated": float(extra), "gradient": grad, "rel_err": float(rel)}


# ---------------------------------------------------------------------------
# conditions

@dataclass
class FOCReport:
    """Kuhn-Tucker audit of one plan."""

    M: float
    w: float
    budget: float
    budget_gap: float
    max_violation: float
    flatoff: float
    tolerances: tuple
    interior_nojump_lumps: list
    lump_inequality_violations: list
    free_interval_max_residual: float
    worst_offenders: list

    @property
    def budget_ok(self):
        return abs(self.budget_gap) <= self.tolerances[0] * self.w

    @property
    def violation_ok(self):
        return self.max_violation <= self.tolerances[1]

    @property
    def flatoff_ok(self):
        return abs(self.flatoff) <= self.tolerances[2]

    @property
    def passed(self):
        return bool(self.budget_ok and self.violation_ok and self.flatoff_ok)

    def to_dict(self):
        d = dict(self.__dict__)
        d["tolerances"] = list(self.tolerances)
        d["pass"] = self.passed
        d["budget_ok"] = bool(self.budget_ok)
        d["violation_ok"] = bool(self.violation_ok)
        d["flatoff_ok"] = bool(self.flatoff_ok)
        return d

    def to_json(self, **kw):
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, **kw)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _threshold(tree, kernel, market, M):
    return M * (market.r + kernel.beta) / kernel.beta * tree.psi


def check_foc(tree, plan, M, w, spec, kernel, market, tolerances=(1e-6, 1e-3, 1e-4),
              config=SolverConfig(), weights="adjoint", n_worst=5, ev=None):
    """Audit budget, gradient constraint and flat-off condition.

    ``max_violation = max (nablaV - M psi) / (M psi)`` over all nodes and
    ``flatoff = E[sum (M psi - nablaV) dC] / (M w)``.
    """
    if not M > 0:
        raise ValueError(f"M must be > 0, got {M}")
    ev = ev or evaluate(tree, plan, spec, kernel, config, weights)
    b = plan_budget(tree, plan)
    ratio = (ev.nablaV - M * tree.psi) / (M * tree.psi)
    dC = plan.lump + plan.rate * tree.delta
    num = float(np.dot(tree.prob, (M * tree.psi - ev.nablaV) * dC))
    den = M * w
    flatoff = num / den if den > 0 else (0.0 if num == 0 else math.copysign(math.inf, num))
    order = np.argsort(-ratio, kind="stable")[:n_worst]
    worst = [{"node": int(k), "jump_pattern": jump_pattern(int(k)), "t": float(tree.t[k]),
              "N": int(tree.N[k]),
              "nablaV_over_Mpsi": float(ev.nablaV[k] / (M * tree.psi[k]))} for k in order]
    audit = structural_audit(tree, plan, M, spec, kernel, market, config, ev=ev)
    free = free_interval_residual(tree, plan, M, spec, kernel, market, config, ev=ev)
    return FOCReport(M=float(M), w=float(w), budget=b, budget_gap=b - w,
                     max_violation=float(np.max(ratio)), flatoff=flatoff,
                     tolerances=tuple(tolerances),
                     interior_nojump_lumps=audit["interior_nojump_lumps"],
                     lump_inequality_violations=audit["lump_inequality_violations"],
                     free_interval_max_residual=free["max_abs"],
                     worst_offenders=worst)


def solve_multiplier(tree, plan, spec, kernel, config=SolverConfig(), weights="adjoint",
                     ev=None):
    """``M = max nablaV / psi`` over the support of the plan.

    Returns
    -------
    tuple of float
        ``(M, spread)`` where ``spread = 1 - min/max`` of the ratio on the support;
        the flat-off condition can only hold when the spread is zero.
    """
    sup = plan.support
    if not np.any(sup):
        raise PlanError("plan has empty support")
    ev = ev or evaluate(tree, plan, spec, kernel, config, weights)
    r = ev.nablaV[sup] / tree.psi[sup]
    M = float(np.max(r))
    return M, float(1 - np.min(r) / M)


def first_hitting(tree, stop):
    """Mask of the first nodes on each path where ``stop`` holds."""
    stop = _stop_mask(tree, stop)
    seen = np.zeros(tree.size, dtype=bool)
    for i in range(tree.n_steps):
        a, b = slice_bounds(i)
        c, d = slice_bounds(i + 1)
        seen[c:d] = np.repeat(seen[a:b] | stop[a:b], 2)
    return stop & ~seen


def _stop_mask(tree, stop):
    if callable(stop):
        return np.array([bool(stop(tree, k)) for k in range(tree.size)])
    m = np.asarray(stop, dtype=bool)
    if m.shape != (tree.size,):
        raise ValueError("stop mask has the wrong shape")
    return m


def stop_at_first_jump(tree):
    """Stopping region of the first jump (or the horizon when none occurs)."""
    return (tree.N >= 1) | (tree.step == tree.n_steps)


def stop_at_time(tree, i):
    return tree.step == i


def conditional_flatoff(tree, plan, M, stop, spec, kernel, config=SolverConfig(),
                        weights="adjoint", ev=None):
    """``E_tau[sum_{s >= tau} (nablaV - M psi) dC]`` at each stopping node.

    Returns
    -------
    dict
        ``nodes`` (indices), ``residual`` (values) and ``max_abs``.
    """
    ev = ev or evaluate(tree, plan, spec, kernel, config, weights)
    src = (ev.nablaV - M * tree.psi) * (plan.lump + plan.rate * tree.delta)
    G = kernels.backward_accumulate(np.ascontiguousarray(src), tree.p, tree.n_steps)
    nodes = np.flatnonzero(first_hitting(tree, stop))
    res = G[nodes]
    return {"nodes": nodes, "residual": res,
            "max_abs": float(np.max(np.abs(res))) if res.size else 0.0}


def free_interval_residual(tree, plan, M, spec, kernel, market, config=SolverConfig(),
                           weights="exp", ev=None):
    """``F / (M (r + beta) / beta psi) - 1`` on nodes with a rate and no lump."""
    ev = ev or evaluate(tree, plan, spec, kernel, config, weights)
    mask = (plan.rate > 0) & (plan.lump == 0)
    nodes = np.flatnonzero(mask)
    if nodes.size == 0:
        return {"nodes": nodes, "residual": np.zeros(0), "max_abs": 0.0}
    D = discount_weight(tree, ev.Y, ev.U, spec, weights).D
    F = D * spec.fy(tree.t, ev.Y, ev.U)
    res = F[nodes] / _threshold(tree, kernel, market, M)[nodes] - 1
    return {"nodes": nodes, "residual": res, "max_abs": float(np.max(np.abs(res)))}


def structural_audit(tree, plan, M, spec, kernel, market, config=SolverConfig(),
                     weights="exp", ev=None, rel_tol=1e-6):
    """Lump-time checks.

    Returns
    -------
    dict
        ``lump_inequality_violations``: lump nodes before the horizon with
        ``F < M (r + beta) / beta psi`` beyond ``rel_tol``;
        ``interior_nojump_lumps``: lumps at ``t > 0`` reached by a quiet step.
    """
    ev = ev or evaluate(tree, plan, spec, kernel, config, weights)
    D = discount_weight(tree, ev.Y, ev.U, spec, weights).D
    F = D * spec.fy(tree.t, ev.Y, ev.U)
    thr = _threshold(tree, kernel, market, M)
    lumps = plan.lump > 0
    before_T = tree.step < tree.n_steps
    bad_ineq = np.flatnonzero(lumps & before_T & (F < thr * (1 - rel_tol)))
    idx = np.arange(tree.size)
    quiet = (idx > 0) & (idx % 2 == 1)
    bad_quiet = np.flatnonzero(lumps & quiet)
    return {"lump_inequality_violations": [int(k) for k in bad_ineq],
            "interior_nojump_lumps": [int(k) for k in bad_quiet]}


def _random_tail(rng, tree, plan, region, style):
    lump = np.zeros(tree.size)
    rate = np.zeros(tree.size)
    nonleaf = tree.step < tree.n_steps
    if style == "perturb":
        noise = rng.lognormal(0.0, 0.5, size=tree.size)
        lump[region] = plan.lump[region] * noise[region]
        rate[region] = plan.rate[region] * rng.lognormal(0.0, 0.5, size=tree.size)[region]
        extra = region & (rng.random(tree.size) < 0.05)
        lump[extra] += rng.exponential(0.05, size=tree.size)[extra]
    else:
        rate[region & nonleaf] = rng.exponential(1.0, size=tree.size)[region & nonleaf]
        extra = region & (rng.random(tree.size) < 0.1)
        lump[extra] = rng.exponential(1.0, size=tree.size)[extra]
    rate[~nonleaf] = 0.0
    return lump, rate


def dpp_check(tree, plan, M, stop, k_samples, seed, spec, kernel, config=SolverConfig(),
              include_self=False):
    """Falsification test of dynamic programming at a stopping time.

    Random continuations from each stopping node on are rescaled so that
    their conditional cost ``E_tau[sum psi dC]`` equals that of ``plan``, and
    compared with ``plan`` by conditional utility at the stopping node.

    Returns
    -------
    dict
        ``worst_gap = min (U_tau(plan) - U_tau(C))``, ``scale = max |U_tau(plan)|``
        and per-sample minima.
    """
    rng = np.random.default_rng(seed)
    taus = first_hitting(tree, stop)
    region = _subtree_mask(tree, taus)
    cost_src = tree.psi * (plan.lump + plan.rate * tree.delta)
    cost_star = kernels.backward_accumulate(np.ascontiguousarray(np.where(region, cost_src, 0.0)),
                                            tree.p, tree.n_steps)
    ev = evaluate(tree, plan, spec, kernel, config)
    tau_idx = np.flatnonzero(taus)
    u_star = ev.U[tau_idx]
    scale = float(np.max(np.abs(u_star))) if tau_idx.size else 0.0
    owner = _owner(tree, taus)
    gaps = []
    for s in range(k_samples):
        if include_self and s == 0:
            lump, rate = plan.lump.copy(), plan.rate.copy()
        else:
            style = "perturb" if s % 2 == 0 else "random"
            lump, rate = _random_tail(rng, tree, plan, region, style)
            src = tree.psi * (lump + rate * tree.delta)
            cost = kernels.backward_accumulate(np.ascontiguousarray(np.where(region, src, 0.0)),
                                               tree.p, tree.n_steps)
            fac = np.zeros(tree.size)
            pos = cost[tau_idx] > 0
            fac[tau_idx[pos]] = cost_star[tau_idx[pos]] / cost[tau_idx[pos]]
            scale_node = np.where(region, fac[owner], 1.0)
            lump = np.where(region, lump * scale_node, plan.lump)
            rate = np.where(region, rate * scale_node, plan.rate)
        cand = ConsumptionPlan(plan.n_steps, lump, rate)
        Yc = satisfaction(tree, cand, kernel)
        Uc, _ = solve_utility(tree, Yc, spec, config)
        gaps.append(float(np.min(u_star - Uc.U[tau_idx])))
    return {"worst_gap": float(min(gaps)) if gaps else 0.0, "scale": scale, "gaps": gaps,
            "n_stopping_nodes": int(tau_idx.size)}


def _subtree_mask(tree, roots):
    m = roots.copy()
    for i in range(tree.n_steps):
        a, b = slice_bounds(i)
        c, d = slice_bounds(i + 1)
        m[c:d] |= np.repeat(m[a:b], 2)
    return m


def _owner(tree, roots):
    """Index of the stopping node that owns each node (``-1`` before stopping)."""
    own = np.where(roots, np.arange(tree.size), -1)
    for i in range(tree.n_steps):
        a, b = slice_bounds(i)
        c, d = slice_bounds(i + 1)
        par = np.repeat(own[a:b], 2)
        own[c:d] = np.where(par >= 0, par, own[c:d])
    return np.where(own >= 0, own, 0)


__all__ = ["WeightField", "GradientField", "ShadowField", "FOCReport", "Evaluation",
           "discount_weight", "gradient", "shadow", "evaluate", "gradient_fd", "check_foc",
           "solve_multiplier", "conditional_flatoff", "free_interval_residual",
           "structural_audit", "dpp_check", "first_hitting", "stop_at_first_jump",
           "stop_at_time"]
