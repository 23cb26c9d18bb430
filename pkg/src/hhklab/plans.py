"""Consumption plans on the event tree and the level of satisfaction.

A plan is a lump per node, consumed at ``t_i`` on that node, plus a rate per
non-leaf node, held constant on ``[t_i, t_{i+1})``. The level of satisfaction
follows ``dY = beta (dC - Y dt)`` and is stored as the right limit, i.e. after
any lump at the node.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .market_tree import TreeError, jump_pattern, n_nodes, node_from_pattern, slice_bounds


class PlanError(ValueError):
    """Invalid plan, kernel or level input."""


@dataclass(frozen=True, eq=False)
class SatisfactionKernel:
    """Weights of past consumption in the level of satisfaction.

    Parameters
    ----------
    eta : float
        Initial exogenous satisfaction, ``>= 0``.
    beta : float
        Depreciation rate per year, ``> 0``.
    theta_table : ndarray, optional
        Tabulated general weight ``theta[i, j] = theta_{t_i, t_j}`` for
        ``j <= i``. Only the lower triangle is read.
    """

    eta: float
    beta: float
    theta_table: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise PlanError(f"beta must be > 0, got {self.beta}")
        if not (self.eta >= 0 and math.isfinite(self.eta)):
            raise PlanError(f"eta must be >= 0, got {self.eta}")
        if self.theta_table is not None:
            th = np.asarray(self.theta_table, dtype=np.float64)
            if th.ndim != 2 or th.shape[0] != th.shape[1]:
                raise PlanError("theta_table must be square")
            low = th[np.tril_indices(th.shape[0])]
            if not np.all(np.isfinite(low)) or np.any(low <= 0):
                raise PlanError("theta_table must be strictly positive on its lower triangle")
            object.__setattr__(self, "theta_table", th)

    @property
    def exponential(self):
        return self.theta_table is None

    @property
    def separable(self):
        """True when ``theta_{t,s} = a_t * b_s`` on the grid."""
        if self.theta_table is None:
            return True
        th = self.theta_table
        ratio = th / th[:, :1]
        for j in range(th.shape[0]):
            col = ratio[j:, j]
            if np.max(np.abs(col - col[0])) > 1e-12 * abs(col[0]):
                return False
        return True

    def separable_factors(self):
        """Return ``(a, b)`` with ``theta[i, j] = a[i] * b[j]``, ``j <= i``."""
        if self.theta_table is None:
            raise PlanError("exponential kernel has no table")
        if not self.separable:
            raise PlanError("theta_table is not separable")
        th = self.theta_table
        a = th[:, 0].copy()
        b = th[-1, :] / th[-1, 0]
        return a, b

    def step_factors(self, n, dt):
        """Per-slice decay, rate gain and lump weight of the exponential kernel."""
        dec = math.exp(-self.beta * dt)
        decay = np.full(n, dec)
        gain = np.full(n, -math.expm1(-self.beta * dt))
        lump_w = np.full(n + 1, self.beta)
        return decay, gain, lump_w


@dataclass(frozen=True, eq=False)
class ConsumptionPlan:
    """Per-node lumps and rates on a tree with ``n_steps`` steps.

    Leaf rates must be zero (there is no step after the horizon).
    """

    n_steps: int
    lump: np.ndarray = field(repr=False)
    rate: np.ndarray = field(repr=False)

    def __post_init__(self):
        size = n_nodes(self.n_steps)
        lump = np.ascontiguousarray(self.lump, dtype=np.float64)
        rate = np.ascontiguousarray(self.rate, dtype=np.float64)
        if lump.shape != (size,) or rate.shape != (size,):
            raise PlanError(f"plan arrays must have shape ({size},)")
        if not (np.all(np.isfinite(lump)) and np.all(np.isfinite(rate))):
            raise PlanError("plan entries must be finite")
        if np.any(lump < 0) or np.any(rate < 0):
            k = int(np.argmin(np.minimum(lump, rate)))
            raise PlanError(f"negative lump or rate at node {k}")
        a, b = slice_bounds(self.n_steps)
        if np.any(rate[a:b] != 0):
            raise PlanError("rates on leaf nodes must be zero")
        object.__setattr__(self, "lump", lump)
        object.__setattr__(self, "rate", rate)

    def shape_key(self):
        return (self.n_steps, n_nodes(self.n_steps))

    @classmethod
    def zero(cls, tree):
        return cls(tree.n_steps, np.zeros(tree.size), np.zeros(tree.size))

    @property
    def support(self):
        """Boolean mask of nodes with a lump or a rate."""
        return (self.lump > 0) | (self.rate > 0)

    def scaled(self, s):
        return ConsumptionPlan(self.n_steps, self.lump * s, self.rate * s)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "jump_pattern", "lump", "rate"])
            for k in range(self.lump.shape[0]):
                pat = jump_pattern(k)
                w.writerow([len(pat), pat, repr(float(self.lump[k])), repr(float(self.rate[k]))])

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path, newline="") as fh:
            r = csv.DictReader(fh)
            missing = {"step", "jump_pattern", "lump", "rate"} - set(r.fieldnames or ())
            if missing:
                raise PlanError(f"plan CSV lacks columns {sorted(missing)}")
            for row in r:
                rows.append(row)
        n = max(int(row["step"]) for row in rows)
        size = n_nodes(n)
        if len(rows) != size:
            raise PlanError(f"plan CSV has {len(rows)} rows, expected {size}")
        lump = np.zeros(size)
        rate = np.zeros(size)
        for row in rows:
            pat = row["jump_pattern"] or ""
            if len(pat) != int(row["step"]):
                raise PlanError(f"jump_pattern {pat!r} does not match step {row['step']}")
            k = node_from_pattern(pat)
            lump[k] = float(row["lump"])
            rate[k] = float(row["rate"])
        return cls(n, lump, rate)


def _check_plan(tree, plan):
    if plan.shape_key() != tree.shape_key():
        raise TreeError("plan is defined on a different tree shape")


def satisfaction(tree, plan, kernel):
    """Level of satisfaction ``Y`` at every node (after the node's lump).

    With the exponential kernel the update inside a step is exact. With a
    tabulated kernel ``Y_i = eta e^{-beta t_i} + sum_j theta[i, j] dC_j`` along the
    path, rates entering with weight ``delta`` at their left endpoint.
    """
    _check_plan(tree, plan)
    n, dt = tree.n_steps, tree.delta
    if kernel.exponential:
        decay, gain, lump_w = kernel.step_factors(n, dt)
        return kernels.forward_satisfaction(plan.lump, plan.rate, decay, gain, lump_w,
                                            float(kernel.eta), n)
    th = kernel.theta_table
    if th.shape[0] < n + 1:
        raise PlanError(f"theta_table must cover {n + 1} grid points")
    y = kernel.eta * np.exp(-kernel.beta * tree.t)
    for i in range(n + 1):
        a, b = slice_bounds(i)
        idx = np.arange(a, b)
        acc = th[i, i] * plan.lump[idx]
        for j in range(i):
            anc = ((idx + 1) >> (i - j)) - 1
            acc = acc + th[i, j] * (plan.lump[anc] + dt * plan.rate[anc])
        y[a:b] += acc
    return y


def convex_combine(plan_a, plan_b, weight):
    """Node-wise mix ``weight * plan_a + (1 - weight) * plan_b``."""
    if not 0.0 <= weight <= 1.0:
        raise PlanError(f"weight must lie in [0, 1], got {weight}")
    if plan_a.shape_key() != plan_b.shape_key():
        raise TreeError("plans live on different trees")
    w = float(weight)
    return ConsumptionPlan(plan_a.n_steps, w * plan_a.lump + (1 - w) * plan_b.lump,
                           w * plan_a.rate + (1 - w) * plan_b.rate)


def minimal_level_satisfaction(tree, level, kernel):
    """Smallest satisfaction path above ``level``.

    ``Y^L_t = e^{-beta t} max(eta, sup_{v <= t} L_v e^{beta v})``, evaluated as a
    decayed running maximum along each path.
    """
    level = tree.check_field(level, "level")
    if not kernel.exponential:
        raise PlanError("minimal level needs the exponential kernel")
    decay, _, _ = kernel.step_factors(tree.n_steps, tree.delta)
    lv = np.where(np.isfinite(level), level, -np.inf)
    return kernels.running_max(np.ascontiguousarray(lv), float(kernel.eta), decay, tree.n_steps)


def plan_from_level(tree, y_level, kernel, tol=1e-10):
    """Plan whose satisfaction reproduces ``y_level``.

    The increase of ``Y`` over pure decay on each child is split into the part
    common to both children, which becomes the parent's rate, and the remainder,
    which becomes a lump at the child divided by ``beta``. The root lump is
    ``(Y_0 - eta) / beta``.

    Raises
    ------
    PlanError
        If ``Y`` ever falls below pure decay by more than ``tol`` (relative).
    """
    y = tree.check_field(y_level, "Y_L")
    if not kernel.exponential:
        raise PlanError("plan_from_level needs the exponential kernel")
    n, beta = tree.n_steps, kernel.beta
    dec = math.exp(-beta * tree.delta)
    gain = -math.expm1(-beta * tree.delta)
    scale = max(1.0, float(np.max(np.abs(y))))
    lump = np.zeros(tree.size)
    rate = np.zeros(tree.size)
    inc0 = y[0] - kernel.eta
    if inc0 < -tol * scale:
        raise PlanError(f"Y_L at the root is below eta by {-inc0}")
    lump[0] = max(inc0, 0.0) / beta
    for i in range(n):
        a, b = slice_bounds(i)
        c, d = slice_bounds(i + 1)
        inc = y[c:d] - np.repeat(y[a:b] * dec, 2)
        if np.min(inc) < -tol * scale:
            k = c + int(np.argmin(inc))
            raise PlanError(f"Y_L decreases faster than decay at node {k} (by {-np.min(inc)})")
        inc = np.maximum(inc, 0.0)
        common = np.minimum(inc[0::2], inc[1::2])
        rate[a:b] = common / gain
        lump[c:d] = (inc - np.repeat(common, 2)) / beta
    return ConsumptionPlan(n, lump, rate)


def pathwise_stieltjes(tree, plan, integrand):
    """Per-leaf ``sum h dC`` along each path (lumps at the node, rates times delta)."""
    _check_plan(tree, plan)
    h = tree.check_field(integrand, "integrand")
    a = np.ascontiguousarray(h * plan.rate * tree.delta)
    b = np.ascontiguousarray(h * plan.lump)
    return kernels.forward_sum(a, b, tree.n_steps)[tree.leaves]


def cumulative_consumption(tree, plan):
    """``C_t`` at every node, including the node's own lump."""
    _check_plan(tree, plan)
    a = np.ascontiguousarray(plan.rate * tree.delta)
    return kernels.forward_sum(a, plan.lump, tree.n_steps)


def level_bound_constant(kernel):
    """Constant ``L' = max(eta, beta, 1)`` in ``Y_t <= L' (1 + C_t)``."""
    return max(kernel.eta, kernel.beta, 1.0)


__all__ = ["SatisfactionKernel", "ConsumptionPlan", "PlanError", "satisfaction",
           "convex_combine", "minimal_level_satisfaction", "plan_from_level",
           "pathwise_stieltjes", "cumulative_consumption", "level_bound_constant"]
