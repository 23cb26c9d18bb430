"""Candidate optimal plans and their calibration to the budget.

Four constructors are provided: everything at time zero, the barrier policy
(consume at the rate that keeps ``F`` on ``M (r + beta) / beta psi``), its
time-additive special case, and the plan of a supplied minimal level.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import kernels
from .bsde import SolverConfig, SolverError, solve_utility
from .foc import evaluate, gradient
from .market_tree import budget, slice_bounds
from .plans import (ConsumptionPlan, PlanError, minimal_level_satisfaction, plan_from_level,
                    satisfaction)

VARIANTS = ("AllAtZero", "Barrier", "TimeAdditiveBarrier", "FromLevel")


@dataclass(frozen=True, eq=False)
class PolicySpec:
    """Policy variant and its parameter.

    ``w`` for ``AllAtZero``, ``M`` for the barrier variants, ``level`` (a node
    field) for ``FromLevel``.
    """

    variant: str
    w: float = None
    M: float = None
    level: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise PlanError(f"unknown policy variant {self.variant!r}")
        if self.variant == "AllAtZero" and not (self.w is not None and self.w >= 0):
            raise PlanError("AllAtZero needs w >= 0")
        if self.variant in ("Barrier", "TimeAdditiveBarrier") and not (self.M is not None
                                                                       and self.M > 0):
            raise PlanError(f"{self.variant} needs M > 0")
        if self.variant == "FromLevel" and self.level is None:
            raise PlanError("FromLevel needs a level field")


@dataclass
class CalibrationResult:
    param: float
    budget: float
    target: float
    iterations: int
    bracket: tuple
    plan: ConsumptionPlan = field(repr=False)

    def to_dict(self):
        return {"param": self.param, "budget": self.budget, "target": self.target,
                "iterations": self.iterations, "bracket": list(self.bracket)}


# ---------------------------------------------------------------------------
# constructors and rate formulas

def all_at_zero(tree, w):
    """Lump ``w`` at the root and nothing afterwards."""
    if not w >= 0:
        raise PlanError(f"w must be >= 0, got {w}")
    lump = np.zeros(tree.size)
    lump[0] = w
    return ConsumptionPlan(tree.n_steps, lump, np.zeros(tree.size))


def generic_rate(Y, U, psi_bar, spec, market, beta, t=0.0, form="direct"):
    """Consumption rate on a free interval.

    ``form="direct"`` uses the partials of ``f``; ``form="decomposed"`` splits the
    rate into the deterministic part, the risk-premium part and the jump part
    using the elasticity ``eps`` and the endogenous discount rate ``rho_f``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    fy = spec.fy(t, Y, U)
    fyy = spec.fyy(t, Y, U)
    fuy = spec.fuy(t, Y, U)
    if np.any(fyy == 0):
        raise ZeroDivisionError("f_yy vanishes")
    lam, k = market.lam, market.psi_drift
    if form == "direct":
        num = (spec.fu(t, Y, U) * fy + spec.fty(t, Y, U)
               - (spec.f(t, Y, U) + lam * psi_bar) * fuy + k * fy)
        return -num / (beta * fyy) + Y
    if form == "decomposed":
        eps = -fy / (Y * fyy)
        rho_f = spec.f(t, Y, U) * fuy / fy - spec.fu(t, Y, U)
        return (((market.r - rho_f) * eps + beta) * Y / beta
                + market.risk_premium * eps * Y / beta
                + lam * psi_bar * fuy / (beta * fyy))
    raise ValueError(f"unknown form {form!r}")


def ez_rate(Y, V, Psi, ez, market, beta, form=1):
    """Epstein-Zin rate in certainty-equivalent variables.

    ``form=1`` uses ``(1 + Psi/V)^(1-rho)``; ``form=2`` uses ``(J(V, Psi) + Psi)/V``.
    """
    V = np.asarray(V, dtype=np.float64)
    Psi = np.asarray(Psi, dtype=np.float64)
    if np.any(V <= 0) or np.any(V + Psi <= 0):
        raise PlanError("need V > 0 and V + Psi > 0")
    al, rho, d = ez.alpha, ez.rho, ez.delta
    k = 1 - rho
    if form == 1:
        jump = (1 + Psi / V) ** k - 1
    elif form == 2:
        J = ((V + Psi) ** k * V ** rho - V) / k - Psi
        jump = k * (J + Psi) / V
    else:
        raise ValueError(f"unknown form {form!r}")
    lam = market.lam
    return (((market.r - d) * al + beta) * Y / beta
            + lam / beta * (al * math.expm1(market.theta) - (1 - al * rho) / k * jump) * Y)


# ---------------------------------------------------------------------------
# barrier policy

def _threshold(tree, market, beta, M):
    return M * (market.r + beta) / beta * tree.psi


def _sweep(tree, spec, market, kernel, M, l0, U_ref, pb_ref, tol):
    """Forward construction of the rates given reference ``U`` and ``psi_bar``.

    The switch between waiting and consuming is a linear ramp of width ``tol``
    in ``F / threshold`` ending at one, so the plan depends continuously on
    ``M`` and on the root lump.
    """
    n, dt, beta = tree.n_steps, tree.delta, kernel.beta
    dec = math.exp(-beta * dt)
    gain = -math.expm1(-beta * dt)
    thr = _threshold(tree, market, beta, M)
    Y = np.empty(tree.size)
    rate = np.zeros(tree.size)
    Y[0] = kernel.eta + beta * l0
    D = np.ones(1)
    for i in range(n):
        a, b = slice_bounds(i)
        c, d = slice_bounds(i + 1)
        t = i * dt
        y, u = Y[a:b], U_ref[a:b]
        with np.errstate(all="ignore"):
            F = D * spec.fy(t, y, u)
            s = np.clip((F / thr[a:b] - (1 - tol)) / tol, 0.0, 1.0)
            on = s > 0
            if np.any(on):
                c_gen = generic_rate(y[on], u[on], pb_ref[a:b][on], spec, market, beta, t)
                rate[a:b][on] = s[on] * np.maximum(c_gen, 0.0)
            D = np.repeat(D * np.exp(spec.fu(t, y, u) * dt), 2)
        Y[c:d] = np.repeat(y * dec + rate[a:b] * gain, 2)
    if not np.all(np.isfinite(rate)):
        raise SolverError("non-finite rate in the barrier sweep")
    return rate


def _root_grad(tree, spec, kernel, plan, config):
    Y = satisfaction(tree, plan, kernel)
    uf, _ = solve_utility(tree, Y, spec, config)
    g = gradient(tree, Y, uf.U, spec, kernel)
    return float(g.nablaV[0])


def _rebuild(tree, spec, market, kernel, M, U_ref, pb_ref, tol, config, l0_hint):
    def plan_at(l0):
        rate = _sweep(tree, spec, market, kernel, M, l0, U_ref, pb_ref, tol)
        lump = np.zeros(tree.size)
        lump[0] = l0
        return ConsumptionPlan(tree.n_steps, lump, rate)

    def h(l0):
        return _root_grad(tree, spec, kernel, plan_at(l0), config) - M

    lo = 0.0 if kernel.eta > 0 else 1e-12
    h_lo = h(lo)
    if h_lo <= 0:
        return plan_at(lo)
    hi = max(l0_hint, 1e-3)
    for _ in range(60):
        if h(hi) < 0:
            break
        lo, hi = hi, 2 * hi
    else:
        raise SolverError("no bracket for the root lump in 60 doublings")
    l0 = brentq(h, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    return plan_at(l0)


def barrier_policy(tree, spec, market, kernel, M, config=SolverConfig(), tol=1e-6,
                   damping=0.5, max_iter=200, plan_tol=1e-8):
    """Barrier policy for the multiplier ``M`` by damped Picard iteration.

    Each iteration solves ``(Y, U, psi_bar)`` for the current plan and rebuilds
    the plan: a root lump chosen so that ``nablaV(0) = M`` (none if already
    ``nablaV(0) <= M``), and at every later node the rate of
    :func:`generic_rate` where ``F >= M (r + beta)/beta psi (1 - tol)``, zero
    otherwise. For separable aggregators the rebuilt plan does not depend on
    the current ``U`` and the first rebuild is the fixed point.

    Returns
    -------
    tuple
        ``(plan, iterations)``.

    Raises
    ------
    SolverError
        On non-convergence, with the tail of the change history.
    """
    if not M > 0:
        raise PlanError(f"M must be > 0, got {M}")
    if not kernel.exponential:
        raise PlanError("the barrier policy needs the exponential kernel")
    # start from the lump-only plan with nablaV(0) = M
    plan = _rebuild_lump_only(tree, spec, kernel, M, config)
    history = []
    for it in range(1, max_iter + 1):
        ev = evaluate(tree, plan, spec, kernel, config)
        new = _rebuild(tree, spec, market, kernel, M, ev.U, ev.psi_bar, tol, config,
                       plan.lump[0])
        change = float(max(np.max(np.abs(new.lump - plan.lump)),
                           np.max(np.abs(new.rate - plan.rate))))
        history.append(change)
        if spec.separable or it == 1:
            plan = new
        else:
            plan = ConsumptionPlan(tree.n_steps,
                                   damping * plan.lump + (1 - damping) * new.lump,
                                   damping * plan.rate + (1 - damping) * new.rate)
        if change <= plan_tol:
            return plan, it
        if it >= 40 and min(history[-20:]) >= 0.5 * min(history[:-20]):
            raise SolverError(f"barrier iteration stalls or oscillates; last changes "
                              f"{history[-5:]}")
    raise SolverError(f"barrier iteration did not converge in {max_iter} iterations; "
                      f"last changes {history[-5:]}")


def _rebuild_lump_only(tree, spec, kernel, M, config):
    def h(l0):
        return _root_grad(tree, spec, kernel, all_at_zero(tree, l0), config) - M

    lo = 0.0 if kernel.eta > 0 else 1e-12
    if h(lo) <= 0:
        return all_at_zero(tree, lo)
    hi = 1.0
    for _ in range(60):
        if h(hi) < 0:
            break
        lo, hi = hi, 2 * hi
    else:
        raise SolverError("no bracket for the root lump in 60 doublings")
    return all_at_zero(tree, brentq(h, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps))


def time_additive_barrier(tree, spec, market, kernel, M, config=SolverConfig(), tol=1e-6):
    """Barrier policy for a separable aggregator (single forward sweep)."""
    if not spec.separable:
        raise PlanError("time_additive_barrier needs a separable aggregator")
    return barrier_policy(tree, spec, market, kernel, M, config, tol)[0]


def from_level(tree, level, kernel):
    """Plan that reflects satisfaction off ``level``."""
    return plan_from_level(tree, minimal_level_satisfaction(tree, level, kernel), kernel)


def build_policy(tree, policy, spec, market, kernel, config=SolverConfig()):
    """Dispatch a :class:`PolicySpec` to its constructor."""
    if policy.variant == "AllAtZero":
        return all_at_zero(tree, policy.w)
    if policy.variant == "Barrier":
        return barrier_policy(tree, spec, market, kernel, policy.M, config)[0]
    if policy.variant == "TimeAdditiveBarrier":
        return time_additive_barrier(tree, spec, market, kernel, policy.M, config)
    return from_level(tree, policy.level, kernel)


# ---------------------------------------------------------------------------
# calibration

def calibrate(tree, family, w, tol=1e-6, decreasing=True, x0=1.0, max_doublings=60,
              max_bisect=200):
    """Choose the family parameter so that the plan's budget equals ``w``.

    Parameters
    ----------
    family : callable
        ``x -> ConsumptionPlan`` for ``x > 0``.
    decreasing : bool
        True when the budget decreases in ``x`` (a multiplier ``M``), False when
        it increases (a scale).

    Raises
    ------
    PlanError
        If no bracket is found in ``max_doublings`` doublings or the bisection
        cannot reach the tolerance.
    """
    if not w >= 0:
        raise PlanError(f"w must be >= 0, got {w}")
    cache = {}

    def B(x):
        if x not in cache:
            p = family(x)
            cache[x] = (budget(tree, p), p)
        return cache[x]

    sign = 1.0 if decreasing else -1.0
    x = float(x0)
    if w == 0:
        if not decreasing:
            p = family(0.0)
            return CalibrationResult(0.0, budget(tree, p), 0.0, 0, (0.0, 0.0), p)
        for i in range(max_doublings):
            b, p = B(x)
            if b == 0:
                return CalibrationResult(x, b, 0.0, i + 1, (x, x), p)
            x *= 2
        raise PlanError(f"no parameter with zero budget in {max_doublings} doublings")

    # bracket [lo, hi] with excess(lo) > 0 > excess(hi), excess = sign * (B - w)
    def excess(x):
        return sign * (B(x)[0] - w)

    lo = hi = x
    e = excess(x)
    it = 0
    if e > 0:
        while excess(hi) > 0:
            it += 1
            if it > max_doublings:
                raise PlanError(f"no bracket in {max_doublings} doublings")
            lo, hi = hi, hi * 2
    else:
        while excess(lo) <= 0:
            if abs(B(lo)[0] - w) <= tol * w:
                return CalibrationResult(lo, B(lo)[0], w, it, (lo, lo), B(lo)[1])
            it += 1
            if it > max_doublings:
                raise PlanError(f"no bracket in {max_doublings} doublings")
            lo, hi = lo / 2, lo
    bracket = (lo, hi)
    for _ in range(max_bisect):
        it += 1
        mid = math.sqrt(lo * hi)
        b, p = B(mid)
        if abs(b - w) <= tol * w:
            return CalibrationResult(mid, b, w, it, bracket, p)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            break
    raise PlanError(f"budget is discontinuous near parameter {lo!r}: cannot reach "
                    f"{w} within {tol} (got {B(lo)[0]!r} and {B(hi)[0]!r})")


# ---------------------------------------------------------------------------
# minimal level

def extract_level(tree, plan, kernel):
    """Level ``L := Y`` where the plan consumes or raised satisfaction, ``-inf`` elsewhere.

    With this level the minimal level of satisfaction reproduces ``Y``.
    """
    Y = satisfaction(tree, plan, kernel)
    dec = math.exp(-kernel.beta * tree.delta)
    L = np.full(tree.size, -np.inf)
    L[0] = Y[0]
    par = (np.arange(1, tree.size) - 1) // 2
    raised = Y[1:] > Y[par] * dec * (1 + 1e-14)
    L[1:][raised] = Y[1:][raised]
    on = plan.support
    L[on] = Y[on]
    return L


def minimal_level_residual(tree, L, kernel, spec, market, M, config=SolverConfig()):
    """Per-node residual of the minimal-level equation.

    At each node ``tau`` the conditional expectation of
    ``sum_{t >= tau} D_t f_y(t, Ytilde_t, U^L_t) beta e^{-beta (t - tau)} delta``
    minus ``M psi_tau``, where ``Ytilde`` is the decayed running sup of ``L``
    restarted at ``tau`` and floored by ``eta e^{-beta t}``. ``U^L`` and ``D``
    belong to the plan of the minimal level.
    """
    if not kernel.exponential:
        raise PlanError("minimal_level_residual needs the exponential kernel")
    L = tree.check_field(L, "L")
    L = np.ascontiguousarray(np.where(np.isfinite(L), L, -np.inf))
    n, dt, beta = tree.n_steps, tree.delta, kernel.beta
    decay, _, _ = kernel.step_factors(n, dt)
    YL = minimal_level_satisfaction(tree, L, kernel)
    UL, _ = solve_utility(tree, YL, spec, config)
    U = UL.U
    fu = spec.fu(tree.t, YL, U)
    D = kernels.forward_product(np.ascontiguousarray(np.exp(fu * dt)), n)
    disc = beta * np.exp(-beta * tree.t) * dt
    out = np.empty(tree.size)
    lf = slice_bounds(n)
    out[lf[0]:lf[1]] = -M * tree.psi[lf[0]:lf[1]]
    for j in range(n):
        a, b = slice_bounds(j)
        floor0 = kernel.eta * math.exp(-beta * j * dt)
        arg = kernels.running_max(L, floor0, decay, n, start=j)
        with np.errstate(all="ignore"):
            src = np.where(tree.step >= j, D * spec.fy(tree.t, np.maximum(arg, 1e-300), U)
                           * disc, 0.0)
        src[tree.leaves] = 0.0
        G = kernels.backward_accumulate(np.ascontiguousarray(src), tree.p, n, stop=j)
        out[a:b] = np.exp(beta * j * dt) * G[a:b] - M * tree.psi[a:b]
    return out


__all__ = ["PolicySpec", "CalibrationResult", "VARIANTS", "all_at_zero", "generic_rate",
           "ez_rate", "barrier_policy", "time_additive_barrier", "from_level", "build_policy",
           "calibrate", "extract_level", "minimal_level_residual"]
