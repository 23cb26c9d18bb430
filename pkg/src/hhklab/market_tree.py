"""Discretized Poisson filtration on a non-recombining binary event tree.

Nodes are stored in heap order. Slice ``i`` (time ``t_i = i * delta``) holds the
``2**i`` nodes with indices ``2**i - 1 .. 2**(i+1) - 2``. Node ``k`` has the
no-jump child ``2k+1`` and the jump child ``2k+2``, so the position of a node
inside its slice, written in binary with ``i`` digits, is its jump pattern.

The state-price density is the geometric Poisson process

    psi_t = exp(theta * N_t - (r + lam * (e^theta - 1)) * t),

and the one-step jump probability is exactly ``lam * delta``.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

DEFAULT_MAX_STEPS = 22


class TreeError(ValueError):
    """Invalid tree construction or tree/field mismatch."""


@dataclass(frozen=True)
class MarketParams:
    """Market primitives.

    Parameters
    ----------
    r : float
        Constant interest rate per year.
    lam : float
        Poisson intensity per year. ``lam = 0`` gives the deterministic market.
    theta : float
        Log jump size of the state-price density, ``theta > 0``.
    T : float
        Horizon in years.
    """

    r: float
    lam: float
    theta: float
    T: float

    def __post_init__(self):
        for name in ("r", "lam", "theta", "T"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise TreeError(f"{name} must be a finite number, got {v!r}")
        if self.lam < 0:
            raise TreeError(f"lam must be >= 0, got {self.lam}")
        if self.T <= 0:
            raise TreeError(f"T must be > 0, got {self.T}")
        if self.theta <= 0:
            raise TreeError(f"theta must be > 0, got {self.theta}")
        if self.r < 0:
            raise TreeError(f"r must be >= 0, got {self.r}")

    @property
    def risk_premium(self):
        """Market risk premium ``lam * (e^theta - 1)``."""
        return self.lam * math.expm1(self.theta)

    @property
    def psi_drift(self):
        """Decay rate of psi between jumps, ``r + lam * (e^theta - 1)``."""
        return self.r + self.risk_premium


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i * T / n_steps``."""

    n_steps: int
    T: float

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise TreeError(f"n_steps must be a positive integer, got {self.n_steps!r}")
        if self.T <= 0:
            raise TreeError(f"T must be > 0, got {self.T}")

    @property
    def delta(self):
        return self.T / self.n_steps

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.delta


def slice_bounds(i):
    """Return ``(start, stop)`` node indices of slice ``i``."""
    return (1 << i) - 1, (1 << (i + 1)) - 1


def n_nodes(n_steps):
    return (1 << (n_steps + 1)) - 1


def jump_pattern(k):
    """Bitstring of jumps (``1``) and quiet steps (``0``) leading to node ``k``."""
    k = int(k)
    i = (k + 1).bit_length() - 1
    if i == 0:
        return ""
    return format(k - (1 << i) + 1, f"0{i}b")


def node_from_pattern(pattern):
    i = len(pattern)
    return (1 << i) - 1 + (int(pattern, 2) if pattern else 0)


@dataclass(frozen=True, eq=False)
class EventTree:
    """Event tree with per-node step, jump count, probability, psi and D*.

    Attributes
    ----------
    params : MarketParams
    grid : TimeGrid
    p : float
        One-step jump probability ``lam * delta``.
    step, N : ndarray of int
    prob, psi, dstar, t : ndarray of float
    """

    params: MarketParams
    grid: TimeGrid
    p: float
    step: np.ndarray = field(repr=False)
    N: np.ndarray = field(repr=False)
    prob: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)
    dstar: np.ndarray = field(repr=False)
    t: np.ndarray = field(repr=False)

    @property
    def n_steps(self):
        return self.grid.n_steps

    @property
    def delta(self):
        return self.grid.delta

    @property
    def size(self):
        return self.prob.shape[0]

    def slice(self, i):
        a, b = slice_bounds(i)
        return slice(a, b)

    @property
    def leaves(self):
        return self.slice(self.n_steps)

    @property
    def interior(self):
        """All non-leaf nodes."""
        return slice(0, slice_bounds(self.n_steps)[0])

    def shape_key(self):
        return (self.n_steps, self.size)

    def check_field(self, x, name="field"):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.size,):
            raise TreeError(f"{name} has shape {x.shape}, tree needs ({self.size},)")
        return x

    def expect_children(self, x, i):
        """Vector of ``E_i[x]`` over the nodes of slice ``i < n_steps``."""
        a, b = slice_bounds(i + 1)
        ch = x[a:b]
        return (1.0 - self.p) * ch[0::2] + self.p * ch[1::2]

    def expectation(self, x):
        """Unconditional expectation ``E[x_T]`` of a leaf field."""
        return float(np.dot(self.prob[self.leaves], np.asarray(x)[self.leaves]))

    def to_csv(self, path):
        """Debug dump: one row per node."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "jump_pattern", "N", "prob", "psi"])
            for k in range(self.size):
                w.writerow([int(self.step[k]), jump_pattern(k), int(self.N[k]),
                            repr(float(self.prob[k])), repr(float(self.psi[k]))])


def build_tree(params, grid, max_steps=DEFAULT_MAX_STEPS):
    """Build the event tree for ``params`` on ``grid``.

    Raises
    ------
    TreeError
        If ``lam * delta >= 1``, the horizons disagree, or ``n_steps`` exceeds
        ``max_steps``.
    """
    n = grid.n_steps
    if n > max_steps:
        raise TreeError(f"n_steps={n} exceeds the cap of {max_steps}")
    if abs(grid.T - params.T) > 1e-12 * params.T:
        raise TreeError(f"grid horizon {grid.T} differs from market horizon {params.T}")
    p = params.lam * grid.delta
    if p >= 1.0:
        raise TreeError(f"lam*delta = {p} must be < 1")
    size = n_nodes(n)
    step = np.empty(size, dtype=np.int16)
    N = np.empty(size, dtype=np.int16)
    prob = np.empty(size)
    step[0] = N[0] = 0
    prob[0] = 1.0
    for i in range(n):
        a, b = slice_bounds(i)
        c, d = slice_bounds(i + 1)
        step[c:d] = i + 1
        N[c:d] = np.repeat(N[a:b], 2)
        N[c + 1:d:2] += 1
        pr = np.repeat(prob[a:b], 2)
        pr[0::2] *= 1.0 - p
        pr[1::2] *= p
        prob[c:d] = pr
    t = step * grid.delta
    psi = np.exp(params.theta * N - params.psi_drift * t)
    dstar = psi * np.exp(params.r * t)
    return EventTree(params=params, grid=grid, p=p, step=step, N=N, prob=prob,
                     psi=psi, dstar=dstar, t=t)


def conditional_expectation(tree, x, node):
    """``E_t[x]`` at ``node`` from the values of ``x`` on its two children."""
    x = tree.check_field(x)
    if node < 0 or node >= tree.size:
        raise TreeError(f"node {node} outside the tree")
    if tree.step[node] == tree.n_steps:
        raise TreeError(f"node {node} is a leaf and has no children")
    return (1.0 - tree.p) * x[2 * node + 1] + tree.p * x[2 * node + 2]


def budget(tree, plan):
    """Cost ``E[int psi dC]`` of a plan, left-endpoint rule for rates."""
    lump, rate = _plan_arrays(tree, plan)
    w = tree.prob * tree.psi
    return float(np.dot(w, lump) + tree.delta * np.dot(w, rate))


def node_budget_weights(tree):
    return tree.prob * tree.psi


def _plan_arrays(tree, plan):
    if getattr(plan, "shape_key", None) is None or plan.shape_key() != tree.shape_key():
        raise TreeError("plan is defined on a different tree shape")
    return plan.lump, plan.rate


def density_moment(params, p, n_samples=100_000, seed=0):
    """Moment ``E*[(dP0/dP*)^p]`` on ``[0, T]``: closed form and Monte Carlo.

    Under ``P*`` the jump count ``N_T`` is Poisson with intensity ``lam * e^theta``
    and ``dP0/dP* = exp(-theta N_T + lam (e^theta - 1) T)``.

    Returns
    -------
    tuple of float
        ``(closed_form, mc_estimate, mc_stderr)``.
    """
    if p < 1:
        raise TreeError(f"p must be >= 1, got {p}")
    if n_samples < 2:
        raise TreeError("n_samples must be >= 2")
    lam, th, T = params.lam, params.theta, params.T
    closed = math.exp(lam * T * math.expm1(th * (1 - p)) - lam * math.expm1(th) * (1 - p) * T)
    rng = np.random.default_rng(seed)
    n_t = rng.poisson(lam * math.exp(th) * T, size=n_samples)
    x = np.exp(p * (-th * n_t + lam * math.expm1(th) * T))
    return closed, float(x.mean()), float(x.std(ddof=1) / math.sqrt(n_samples))


__all__ = ["MarketParams", "TimeGrid", "EventTree", "TreeError", "build_tree",
           "conditional_expectation", "budget", "density_moment", "jump_pattern",
           "node_from_pattern", "slice_bounds", "n_nodes", "DEFAULT_MAX_STEPS", "kernels"]
