"""Recursive utility on the event tree.

The utility solves the jump BSDE ``dU = -f dt + psi_bar (dN - lam dt)`` with
``U_T = 0``. On the tree this is the backward recursion

    U_i = E_i[U_{i+1}] + f(t_i, Y_i, U_i) * delta          (implicit)
    U_i = E_i[U_{i+1}] + f(t_i, Y_i, E_i[U_{i+1}]) * delta (explicit)

and ``psi_bar_i = U(jump child) - U(no-jump child)``. The Brownian integrand of
the continuous model is identically zero on a Poisson filtration and is not
represented at all.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .aggregators import AggregatorDomainError
from .market_tree import jump_pattern, slice_bounds


class SolverError(RuntimeError):
    """Fixed point failure or domain exit during a backward solve."""


@dataclass(frozen=True)
class SolverConfig:
    """Backward solver settings.

    Parameters
    ----------
    scheme : {"implicit", "explicit"}
    tol : float
        Absolute Newton tolerance (relative for values above one).
    max_iter : int
        Newton iteration cap per slice.
    lipschitz_K : float, optional
        If given, ``K * delta < 1`` is checked before an implicit solve.
    """

    scheme: str = "implicit"
    tol: float = 1e-12
    max_iter: int = 100
    lipschitz_K: float = None

    def __post_init__(self):
        if self.scheme not in ("implicit", "explicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not self.tol > 0 or self.max_iter < 1:
            raise ValueError("tol must be > 0 and max_iter >= 1")


@dataclass(frozen=True, eq=False)
class UtilityField:
    U: np.ndarray = field(repr=False)

    @property
    def U0(self):
        return float(self.U[0])


@dataclass(frozen=True, eq=False)
class JumpField:
    """Jump integrand on non-leaf nodes (zero on leaves)."""

    psi_bar: np.ndarray = field(repr=False)


def implicit_step(E, t, y, spec, dt, tol=1e-12, max_iter=100, extra=None, node_offset=0):
    """Solve ``x = E + dt * (f(t, y, x) + extra(x))`` node-wise.

    Newton is started to the right of the largest root and so decreases
    monotonically to it when the driver is concave in ``x``. This selects the
    nontrivial root for drivers that vanish at ``x = 0`` with infinite slope.

    Parameters
    ----------
    extra : callable, optional
        Returns ``(value, derivative)`` of an additional driver term.
    """
    E = np.asarray(E, dtype=np.float64)
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), E.shape)

    def drv(x):
        v = spec.f(t, y, x)
        dv = spec.fu(t, y, x)
        if extra is not None:
            ev, edv = extra(x)
            v = v + ev
            dv = dv + edv
        return v, dv

    lo = spec.u_lower
    with np.errstate(all="ignore"):
        start = E.copy()
        if lo > -math.inf:
            start = np.maximum(start, lo + 1e-300)
        v0, _ = drv(start)
        v0 = np.where(np.isfinite(v0), v0, 0.0)
        width = dt * (np.abs(v0) + 1.0) + 1e-3 * np.abs(E)
        x = E + width
        for _ in range(200):
            v, _ = drv(x)
            h = x - E - dt * v
            bad = ~(h >= 0)
            if not np.any(bad):
                break
            width = np.where(bad, 2 * width, width)
            x = E + width
        else:
            k = int(np.flatnonzero(bad)[0])
            raise SolverError(f"no bracket for the implicit step at node {node_offset + k}")
        for it in range(max_iter):
            v, dv = drv(x)
            h = x - E - dt * v
            dh = 1.0 - dt * dv
            step = h / dh
            x_new = x - step
            if lo > -math.inf:
                x_new = np.where(x_new <= lo, 0.5 * (x + lo), x_new)
            done = np.abs(x_new - x) <= tol * np.maximum(1.0, np.abs(x_new))
            x = x_new
            if np.all(done):
                break
        else:
            k = int(np.flatnonzero(~done)[0])
            raise SolverError(
                f"implicit step did not converge in {max_iter} iterations at node "
                f"{node_offset + k} (t={float(np.broadcast_to(t, E.shape).ravel()[k])!r})")
    if not np.all(np.isfinite(x)):
        k = int(np.flatnonzero(~np.isfinite(x))[0])
        raise SolverError(f"non-finite utility at node {node_offset + k}")
    return x


def solve_utility(tree, Y, spec, config=SolverConfig()):
    """Backward solve for ``U`` and ``psi_bar`` given the satisfaction field ``Y``.

    Raises
    ------
    SolverError
        If a Newton iteration fails; the message names the node.
    AggregatorDomainError
        If the driver leaves its domain; the message names the slice.
    """
    Y = tree.check_field(Y, "Y")
    n, dt = tree.n_steps, tree.delta
    if config.scheme == "implicit" and config.lipschitz_K is not None:
        if config.lipschitz_K * dt >= 1:
            raise SolverError(f"K*delta = {config.lipschitz_K * dt} must be < 1")
    U = np.zeros(tree.size)
    psi_bar = np.zeros(tree.size)
    for i in range(n - 1, -1, -1):
        a, b = slice_bounds(i)
        c, d = slice_bounds(i + 1)
        ch = U[c:d]
        E = (1.0 - tree.p) * ch[0::2] + tree.p * ch[1::2]
        psi_bar[a:b] = ch[1::2] - ch[0::2]
        t = i * dt
        y = Y[a:b]
        if np.any(y <= 0):
            raise AggregatorDomainError(f"Y <= 0 on slice {i}")
        if config.scheme == "implicit":
            U[a:b] = implicit_step(E, t, y, spec, dt, config.tol, config.max_iter,
                                   node_offset=a)
        else:
            with np.errstate(all="ignore"):
                U[a:b] = E + dt * spec.f(t, y, E)
            if not np.all(np.isfinite(U[a:b])):
                raise AggregatorDomainError(f"explicit step left the domain on slice {i}")
    return UtilityField(U), JumpField(psi_bar)


def martingale_residual(tree, Y, U, spec):
    """Max over non-leaf nodes of ``|U_i - E_i[U_{i+1}] - f(t_i, Y_i, U_i) delta|``."""
    worst = 0.0
    for i in range(tree.n_steps):
        a, b = slice_bounds(i)
        E = tree.expect_children(U, i)
        r = U[a:b] - E - spec.f(i * tree.delta, Y[a:b], U[a:b]) * tree.delta
        worst = max(worst, float(np.max(np.abs(r))))
    return worst


def solve_path(times, Y_path, spec, config=SolverConfig()):
    """Tree recursion specialised to a deterministic ``Y`` (one node per slice).

    When ``Y`` depends on time only, every slice of the tree solution is
    constant and equals this path, so large ``n`` can be run without the tree.
    """
    times = np.asarray(times, dtype=np.float64)
    Y_path = np.asarray(Y_path, dtype=np.float64)
    n = times.size - 1
    dt = times[1] - times[0]
    U = np.zeros(n + 1)
    for i in range(n - 1, -1, -1):
        E = U[i + 1:i + 2]
        if config.scheme == "implicit":
            U[i] = implicit_step(E, times[i], Y_path[i:i + 1], spec, dt, config.tol,
                                 config.max_iter, node_offset=i)[0]
        else:
            U[i] = E[0] + dt * float(spec.f(times[i], Y_path[i], E[0]))
    return U


def solve_deterministic(times, Y_path, spec, substeps=1):
    """Fourth-order Runge-Kutta oracle for ``dU/dt = -f(t, Y_t, U_t)``, ``U_T = 0``.

    Parameters
    ----------
    times : array_like
        Increasing output grid ending at ``T``.
    Y_path : callable or array_like
        ``Y(t)``; an array on ``times`` is interpolated linearly.
    substeps : int
        RK4 steps per grid interval.

    Notes
    -----
    When the spec carries a change of variable (Epstein-Zin), the lifted ODE is
    integrated instead; it is linear and regular at the terminal point where
    the original driver is not Lipschitz.
    """
    times = np.asarray(times, dtype=np.float64)
    if callable(Y_path):
        yfun = Y_path
    else:
        yp = np.asarray(Y_path, dtype=np.float64)

        def yfun(t):
            return np.interp(t, times, yp)

    if spec.lift is not None:
        to_w, from_w, w_rhs = spec.lift

        def rhs(t, x):
            return w_rhs(t, yfun(t), x)

        def back(x):
            return from_w(x)
    else:
        def rhs(t, x):
            return -spec.f(t, yfun(t), x)

        def back(x):
            return x

    x = 0.0
    out = np.zeros(times.size)
    out[-1] = back(x)
    for j in range(times.size - 1, 0, -1):
        t1, t0 = times[j], times[j - 1]
        h = (t0 - t1) / substeps
        t = t1
        for _ in range(substeps):
            k1 = rhs(t, x)
            k2 = rhs(t + h / 2, x + h / 2 * k1)
            k3 = rhs(t + h / 2, x + h / 2 * k2)
            k4 = rhs(t + h, x + h * k3)
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t = t + h
            if not np.isfinite(x):
                raise SolverError(f"oracle left the domain near t={t}")
        out[j - 1] = back(x)
    if spec.lift is None:
        bad = ~spec.in_domain(np.vectorize(yfun)(times), out)
        # the terminal value may sit on the boundary of the domain
        bad[-1] = False
        if np.any(bad):
            raise SolverError(f"oracle left the domain at t={times[np.flatnonzero(bad)[0]]}")
    return out


# ---------------------------------------------------------------------------
# Kreps-Porteus form of Epstein-Zin

def _kp_parts(ez):
    d, al, rho = ez.delta, ez.alpha, ez.rho
    a = 1 - 1 / al
    c = d / a
    k = 1 - rho

    def g(y, v):
        return c * (y ** a * v ** (1 / al) - v)

    def gv(y, v):
        return c * (y ** a * v ** (1 / al - 1) / al - 1)

    def J(v, psi):
        return ((v + psi) ** k * v ** rho - v) / k - psi

    def Jv(v, psi):
        return ((v + psi) ** (k - 1) * v ** rho + rho * (v + psi) ** k * v ** (rho - 1) / k
                - 1 / k)

    return g, gv, J, Jv


def kp_phi(v, rho):
    return v ** (1 - rho) / (1 - rho)


def kp_solve_ez(tree, Y, ez, market, config=SolverConfig()):
    """Epstein-Zin utility through its certainty-equivalent form.

    ``V_i = E_i[V_{i+1}] + (g(Y_i, V_i) + lam J(V_i, Psi_i)) delta`` with
    ``Psi_i = V(jump child) - V(no-jump child)``.

    Returns
    -------
    tuple of ndarray
        ``(V, Psi, U, psi_bar)`` with ``U = Phi(V)`` and
        ``psi_bar = ((V + Psi)^(1-rho) - V^(1-rho)) / (1 - rho)``.
    """
    if not (ez.rho < 1 and ez.alpha > 1 and 1 / ez.alpha > ez.rho):
        raise AggregatorDomainError("the certainty-equivalent solver needs rho < 1 < alpha < 1/rho")
    Y = tree.check_field(Y, "Y")
    n, dt, lam = tree.n_steps, tree.delta, market.lam
    g, gv, J, Jv = _kp_parts(ez)

    class _KPSpec:
        u_lower = 0.0

    V = np.zeros(tree.size)
    Psi = np.zeros(tree.size)
    for i in range(n - 1, -1, -1):
        a, b = slice_bounds(i)
        c, d = slice_bounds(i + 1)
        ch = V[c:d]
        E = (1.0 - tree.p) * ch[0::2] + tree.p * ch[1::2]
        ps = ch[1::2] - ch[0::2]
        Psi[a:b] = ps
        y = Y[a:b]

        spec = _KPSpec()
        spec.f = lambda t, yy, v: g(yy, v)
        spec.fu = lambda t, yy, v: gv(yy, v)

        def extra(v, ps=ps):
            with np.errstate(all="ignore"):
                return lam * J(v, ps), lam * Jv(v, ps)

        V[a:b] = implicit_step(E, i * dt, y, spec, dt, config.tol, config.max_iter,
                               extra=extra if lam > 0 else None, node_offset=a)
        if np.any(V[a:b] + ps <= 0):
            k = a + int(np.flatnonzero(V[a:b] + ps <= 0)[0])
            raise AggregatorDomainError(f"V + Psi <= 0 at node {k}")
    U = kp_phi(V, ez.rho)
    with np.errstate(all="ignore"):
        psi_bar = np.where(V > 0, ((V + Psi) ** (1 - ez.rho) - V ** (1 - ez.rho)) / (1 - ez.rho), 0.0)
    psi_bar[tree.leaves] = 0.0
    return V, Psi, U, psi_bar


def kp_solve_path(times, Y_path, ez, config=SolverConfig()):
    """Certainty-equivalent recursion for a deterministic ``Y`` (``Psi = 0``)."""
    g, gv, _, _ = _kp_parts(ez)

    class _KPSpec:
        u_lower = 0.0

    spec = _KPSpec()
    spec.f = lambda t, yy, v: g(yy, v)
    spec.fu = lambda t, yy, v: gv(yy, v)
    times = np.asarray(times, dtype=np.float64)
    n = times.size - 1
    dt = times[1] - times[0]
    V = np.zeros(n + 1)
    for i in range(n - 1, -1, -1):
        V[i] = implicit_step(V[i + 1:i + 2], times[i], np.asarray(Y_path)[i:i + 1], spec, dt,
                             config.tol, config.max_iter, node_offset=i)[0]
    return V, kp_phi(V, ez.rho)


# ---------------------------------------------------------------------------
# convergence

@dataclass
class RefineRow:
    n: int
    U0: float
    diff_prev: float
    err_oracle: float


def empirical_order(errors, n=None):
    """Least-squares slope of ``-log(error)`` against ``log(n)``.

    Without ``n`` the errors are taken to come from successive halvings of the
    step.
    """
    e = np.asarray(errors, dtype=np.float64)
    if np.any(e <= 0):
        return math.inf if np.all(e == 0) else float("nan")
    x = np.log2(np.asarray(n, dtype=np.float64)) if n is not None else np.arange(e.size)
    return float(-np.polyfit(x, np.log2(e), 1)[0])


def refine_study(solve_at_n, n_list, oracle=None):
    """Convergence table of ``U_0`` over ``n_list``.

    Parameters
    ----------
    solve_at_n : callable
        ``n -> U_0`` on the grid with ``n`` steps.
    oracle : float, optional
        Reference value; when given the order is estimated from the errors,
        otherwise from successive differences.

    Returns
    -------
    tuple
        ``(rows, order)``.
    """
    n_list = list(n_list)
    if sorted(n_list) != n_list or len(set(n_list)) != len(n_list):
        raise ValueError("n_list must be strictly increasing")
    rows = []
    prev = None
    for n in n_list:
        u0 = float(solve_at_n(n))
        rows.append(RefineRow(n=n, U0=u0,
                              diff_prev=float("nan") if prev is None else abs(u0 - prev),
                              err_oracle=float("nan") if oracle is None else abs(u0 - oracle)))
        prev = u0
    if oracle is not None:
        errs = [r.err_oracle for r in rows]
        ns = n_list
    else:
        errs = [r.diff_prev for r in rows[1:]]
        ns = n_list[1:]
    if len(errs) < 2:
        return rows, float("nan")
    if all(e == 0 for e in errs):
        return rows, math.inf
    return rows, empirical_order(errs, ns)


def dump_nodes(path, tree, Y, U, psi_bar):
    """Per-node CSV: step, jump_pattern, Y, U, psi_bar."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "jump_pattern", "Y", "U", "psi_bar"])
        for k in range(tree.size):
            w.writerow([int(tree.step[k]), jump_pattern(k), repr(float(Y[k])),
                        repr(float(U[k])), repr(float(psi_bar[k]))])


__all__ = ["SolverConfig", "SolverError", "UtilityField", "JumpField", "solve_utility",
           "solve_path", "solve_deterministic", "kp_solve_ez", "kp_solve_path", "kp_phi",
           "refine_study", "RefineRow", "empirical_order", "martingale_residual",
           "implicit_step", "dump_nodes"]
