"""Aggregators ``f(t, y, u)``, their partial derivatives and diagnostics.

Three families are provided: Epstein-Zin, time-additive power felicity, and
separable ``g(t, y) - delta u``. All evaluators are vectorized over numpy
arrays.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class AggregatorDomainError(ValueError):
    """Evaluation outside the aggregator's domain."""


def _zero(t, y, u):
    return np.zeros(np.broadcast(t, y, u).shape)


@dataclass(frozen=True, eq=False)
class AggregatorSpec:
    """Aggregator with closed-form partials.

    Attributes
    ----------
    name : str
    f, fy, fu, fyy, fty, fuy, fuu : callable
        ``f(t, y, u)`` and its partials, vectorized.
    u_lower : float
        Open lower bound of the ``u`` domain (``-inf`` when unrestricted).
    u_upper : float
        Open upper bound of the ``u`` domain.
    params : dict
        Family parameters, for reports.
    flags : tuple of str
        Construction warnings.
    lift : tuple or None
        Optional ``(to_w, from_w, w_rhs)`` change of variable used by the
        deterministic ODE oracle when ``f`` is not Lipschitz at ``u = 0``.
    """

    name: str
    f: Callable
    fy: Callable
    fu: Callable
    fyy: Callable
    fty: Callable = _zero
    fuy: Callable = _zero
    fuu: Callable = _zero
    u_lower: float = -math.inf
    u_upper: float = math.inf
    params: dict = field(default_factory=dict)
    flags: tuple = ()
    lift: tuple = None
    separable: bool = False

    def in_domain(self, y, u):
        y = np.asarray(y, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        return (y > 0) & (u > self.u_lower) & (u < self.u_upper)

    def check_domain(self, y, u, where=""):
        ok = self.in_domain(y, u)
        if not np.all(ok):
            bad = np.flatnonzero(~np.broadcast_to(ok, np.broadcast(y, u).shape).ravel())[0]
            yb = np.broadcast_to(y, ok.shape).ravel()[bad]
            ub = np.broadcast_to(u, ok.shape).ravel()[bad]
            raise AggregatorDomainError(
                f"{self.name}: (y, u) = ({yb}, {ub}) outside the domain{where}")


# ---------------------------------------------------------------------------
# Epstein-Zin

@dataclass(frozen=True)
class EZParams:
    """Epstein-Zin parameters.

    Parameters
    ----------
    delta : float
        Subjective discount rate.
    alpha : float
        Elasticity of intertemporal substitution.
    rho : float
        Relative risk aversion.
    """

    delta: float
    alpha: float
    rho: float

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not (self.alpha > 0 and self.alpha != 1):
            raise ValueError(f"alpha must be > 0 and != 1, got {self.alpha}")
        if not (self.rho > 0 and self.rho != 1):
            raise ValueError(f"rho must be > 0 and != 1, got {self.rho}")

    @property
    def sigma(self):
        return (1 - self.rho) / (1 - 1 / self.alpha)


def make_epstein_zin(params):
    """Epstein-Zin felicity.

    ``f(y, u) = delta/(1 - 1/alpha) y^(1-1/alpha) [(1-rho) u]^(1-1/sigma) - delta sigma u``
    with ``sigma = (1 - rho)/(1 - 1/alpha)``, defined where ``(1 - rho) u > 0``.
    """
    d, al, rho = params.delta, params.alpha, params.rho
    a = 1 - 1 / al
    sig = params.sigma
    b = 1 - 1 / sig
    c = d / a
    k = 1 - rho

    def f(t, y, u):
        return c * y ** a * (k * u) ** b - d * sig * u

    def fy(t, y, u):
        return d * y ** (-1 / al) * (k * u) ** b

    def fyy(t, y, u):
        return -(d / al) * y ** (-1 / al - 1) * (k * u) ** b

    def fu(t, y, u):
        return c * b * k * y ** a * (k * u) ** (b - 1) - d * sig

    def fuu(t, y, u):
        return c * b * (b - 1) * k * k * y ** a * (k * u) ** (b - 2)

    def fuy(t, y, u):
        return d * b * k * y ** (-1 / al) * (k * u) ** (b - 1)

    # W = ((1-rho) u)^(1/sigma) solves the linear ODE dW/dt = -delta (y^a - W)
    def to_w(u):
        return (k * u) ** (1 / sig)

    def from_w(w):
        return w ** sig / k

    def w_rhs(t, y, w):
        return -d * (y ** a - w)

    lower, upper = (0.0, math.inf) if rho < 1 else (-math.inf, 0.0)
    flags = () if rho < 1 else ("ez_rho_gt_1_domain_u_negative",)
    return AggregatorSpec(
        name="epstein_zin", f=f, fy=fy, fu=fu, fyy=fyy, fty=_zero, fuy=fuy, fuu=fuu,
        u_lower=lower, u_upper=upper,
        params={"delta": d, "alpha": al, "rho": rho, "sigma": sig, "growth_alpha": a},
        flags=flags, lift=(to_w, from_w, w_rhs) if rho < 1 else None)


def ez_regime_threshold(alpha, market, beta):
    """Discount rate above which the operator is nonpositive for Epstein-Zin."""
    return market.risk_premium + market.r + beta / alpha


# ---------------------------------------------------------------------------
# time-additive

@dataclass(frozen=True)
class TimeAdditiveParams:
    """``f = delta/(1-rho) y^(1-rho) - delta u`` with ``0 < rho < 1``."""

    delta: float
    rho: float

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")

    @property
    def alpha_prime(self):
        return 1 - self.rho

    def mu(self, market, beta):
        """``lam (e^theta - 1) + r + beta (1 - alpha') - delta``."""
        return market.risk_premium + market.r + beta * (1 - self.alpha_prime) - self.delta

    def free_rate_ratio(self, market, beta):
        """Rate over satisfaction on a free interval, ``mu / (beta (1 - alpha'))``."""
        return self.mu(market, beta) / (beta * (1 - self.alpha_prime))


def make_time_additive(params):
    d, rho = params.delta, params.rho

    def f(t, y, u):
        return d / (1 - rho) * y ** (1 - rho) - d * u

    def fy(t, y, u):
        return d * y ** (-rho) + 0.0 * u

    def fyy(t, y, u):
        return -rho * d * y ** (-rho - 1) + 0.0 * u

    def fu(t, y, u):
        return np.full(np.broadcast(t, y, u).shape, -d)

    return AggregatorSpec(name="time_additive", f=f, fy=fy, fu=fu, fyy=fyy,
                          params={"delta": d, "rho": rho}, separable=True)


# ---------------------------------------------------------------------------
# separable

def _fd(fun, h_rel=1e-4):
    def d1(t, y):
        h = h_rel * np.maximum(np.abs(y), 1e-3)
        return (8 * (fun(t, y + h) - fun(t, y - h)) - (fun(t, y + 2 * h) - fun(t, y - 2 * h))) / (12 * h)
    return d1


def make_separable(g, delta, dg=None, d2g=None, dtg=None, y_probe=None, name="separable"):
    """``f(t, y, u) = g(t, y) - delta u``.

    Parameters
    ----------
    g : callable
        Felicity ``g(t, y)``, vectorized.
    delta : float
        Discount rate, ``>= 0``.
    dg, d2g, dtg : callable, optional
        ``dg/dy``, ``d2g/dy2`` and ``d2g/dtdy``. Missing ones are replaced by
        fourth-order central differences.
    y_probe : array_like, optional
        Points at which monotonicity and concavity of ``g`` are sampled. A
        failure adds a flag rather than raising.
    """
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    dg = dg or _fd(g)
    d2g = d2g or _fd(dg)
    if dtg is None:
        def dtg(t, y, h=1e-5):
            return (dg(t + h, y) - dg(t - h, y)) / (2 * h)
    d = float(delta)

    def f(t, y, u):
        return g(t, y) - d * u

    def fy(t, y, u):
        return dg(t, y) + 0.0 * u

    def fyy(t, y, u):
        return d2g(t, y) + 0.0 * u

    def fty(t, y, u):
        return dtg(t, y) + 0.0 * u

    def fu(t, y, u):
        return np.full(np.broadcast(t, y, u).shape, -d)

    flags = []
    yp = np.geomspace(1e-3, 1e3, 61) if y_probe is None else np.asarray(y_probe, dtype=float)
    tp = np.zeros_like(yp)
    with np.errstate(all="ignore"):
        if np.any(dg(tp, yp) <= 0):
            flags.append("g_not_increasing")
        if np.any(d2g(tp, yp) > 1e-12 * np.maximum(1.0, np.abs(dg(tp, yp)))):
            flags.append("g_not_concave")
    return AggregatorSpec(name=name, f=f, fy=fy, fu=fu, fyy=fyy, fty=fty,
                          params={"delta": d}, flags=tuple(flags), separable=True)


def power_felicity(exponent):
    """``g(y) = y^exponent`` with its derivatives, for :func:`make_separable`."""
    q = float(exponent)

    def g(t, y):
        return y ** q

    def dg(t, y):
        return q * y ** (q - 1)

    def d2g(t, y):
        return q * (q - 1) * y ** (q - 2)

    def dtg(t, y):
        return 0.0 * y

    return g, dg, d2g, dtg


# ---------------------------------------------------------------------------
# diagnostics

def operator_L(spec, market, beta, t, y, u):
    """Regime operator.

    ``(r + lam (e^theta - 1)) f_y - beta y f_yy + f_ty + f_u f_y - f f_uy``.
    """
    spec.check_domain(y, u)
    fy = spec.fy(t, y, u)
    return (market.psi_drift * fy - beta * y * spec.fyy(t, y, u) + spec.fty(t, y, u)
            + spec.fu(t, y, u) * fy - spec.f(t, y, u) * spec.fuy(t, y, u))


def elasticity_and_discount(spec, y, u, t=0.0):
    """Elasticity of substitution and endogenous discount rate.

    ``eps = -f_y / (y f_yy)`` and ``rho_f = f f_uy / f_y - f_u``.
    """
    spec.check_domain(y, u)
    fy = spec.fy(t, y, u)
    fyy = spec.fyy(t, y, u)
    if np.any(fy == 0) or np.any(fyy == 0):
        raise ZeroDivisionError("f_y or f_yy vanishes; diagnostics undefined")
    eps = -fy / (y * fyy)
    rho_f = spec.f(t, y, u) * spec.fuy(t, y, u) / fy - spec.fu(t, y, u)
    return eps, rho_f


@dataclass(frozen=True)
class AssumptionProfile:
    """Constants of the standing regularity assumption.

    ``q = 1 / (1 - 2 growth_alpha p)`` is derived.
    """

    K: float
    growth_alpha: float
    p: float

    def __post_init__(self):
        if not (0 <= self.K < math.inf):
            raise ValueError(f"K must be finite and >= 0, got {self.K}")
        if not 0 < self.growth_alpha < 0.5:
            raise ValueError(f"growth_alpha must lie in (0, 1/2), got {self.growth_alpha}")
        if not self.p > 1:
            raise ValueError(f"p must be > 1, got {self.p}")
        if not 2 * self.growth_alpha * self.p < 1:
            raise ValueError("need 2 * growth_alpha * p < 1")

    @property
    def q(self):
        return 1 / (1 - 2 * self.growth_alpha * self.p)


@dataclass(frozen=True)
class SampleGrid:
    """Box of ``(t, y, u)`` sample points for :func:`validate_a1`."""

    t_range: tuple
    y_range: tuple
    u_range: tuple
    n_points: int = 200


@dataclass
class A1Report:
    name: str
    min_hessian_eig: float
    max_hessian_eig_interior: float
    min_fy: float
    lipschitz_u: float
    growth_ratio: float
    K: float
    concave: bool
    strictly_concave: bool
    increasing: bool
    lipschitz_ok: bool
    growth_ok: bool
    flags: list

    @property
    def passed(self):
        return (self.concave and self.strictly_concave and self.increasing
                and self.lipschitz_ok and self.growth_ok and not self.flags)

    def to_dict(self):
        d = dict(self.__dict__)
        d["passed"] = self.passed
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def validate_a1(spec, profile, sample_grid, seed=0):
    """Sample the regularity conditions on a box; violations are reported.

    The report holds the extreme eigenvalues of the ``(y, u)`` Hessian, the
    smallest ``f_y``, the empirical Lipschitz constant in ``u`` and the growth
    ratio ``|f(t, y, 0)| / (1 + y^growth_alpha)``.
    """
    rng = np.random.default_rng(seed)
    n = int(sample_grid.n_points)
    t = rng.uniform(*sample_grid.t_range, size=n)
    y = rng.uniform(*sample_grid.y_range, size=n)
    u = rng.uniform(*sample_grid.u_range, size=n)
    flags = list(spec.flags)
    ok = spec.in_domain(y, u)
    if not np.all(ok):
        flags.append(f"domain_restricted:{int(np.sum(~ok))}_samples_outside")
    t, y, u = t[ok], y[ok], u[ok]
    if y.size == 0:
        raise AggregatorDomainError("no sample point lies in the domain")
    with np.errstate(all="ignore"):
        hyy = spec.fyy(t, y, u)
        huu = spec.fuu(t, y, u)
        huy = spec.fuy(t, y, u)
        tr = hyy + huu
        det = hyy * huu - huy * huy
        disc = np.sqrt(np.maximum(tr * tr / 4 - det, 0.0))
        eig_max = tr / 2 + disc
        eig_min = tr / 2 - disc
        fy = spec.fy(t, y, u)
        u2 = rng.uniform(*sample_grid.u_range, size=y.size)
        ok2 = spec.in_domain(y, u2) & (u2 != u)
        lip = np.abs(spec.f(t, y, u) - spec.f(t, y, u2)) / np.abs(u - u2)
        lip = float(np.max(lip[ok2])) if np.any(ok2) else 0.0
        if spec.in_domain(1.0, 0.0):
            f0 = np.abs(spec.f(t, y, np.zeros_like(y)))
        else:
            # f(t, y, 0) is a boundary value; use the limit from inside
            eps = 1e-12 if spec.u_lower == 0.0 else -1e-12
            f0 = np.abs(spec.f(t, y, np.full_like(y, eps)))
        growth = float(np.max(f0 / (1 + y ** profile.growth_alpha)))
    if spec.name == "epstein_zin":
        ga = spec.params["growth_alpha"]
        if abs(ga - profile.growth_alpha) > 1e-12:
            flags.append(f"growth_alpha_mismatch:expected_{ga!r}")
    tol = 1e-12
    return A1Report(
        name=spec.name,
        min_hessian_eig=float(np.min(eig_min)),
        max_hessian_eig_interior=float(np.max(eig_max)),
        min_fy=float(np.min(fy)),
        lipschitz_u=lip,
        growth_ratio=growth,
        K=profile.K,
        concave=bool(np.max(eig_max) <= tol),
        strictly_concave=bool(np.max(eig_max) < -tol or _strict_along_lines(spec, t, y, u)),
        increasing=bool(np.min(fy) > 0),
        lipschitz_ok=bool(lip <= profile.K * (1 + 1e-9)),
        growth_ok=bool(growth <= profile.K * (1 + 1e-9)),
        flags=flags,
    )


def _strict_along_lines(spec, t, y, u):
    # Separable specs are linear in u, so the Hessian is singular; strictness
    # is then checked in y only, which is what the utility needs.
    if not spec.separable:
        return False
    with np.errstate(all="ignore"):
        return bool(np.max(spec.fyy(t, y, u)) < 0)


def derivative_check(spec, n_points=200, seed=0, y_range=(0.2, 5.0), u_range=None,
                     t_range=(0.0, 1.0)):
    """Largest relative error of each partial against Richardson central differences."""
    rng = np.random.default_rng(seed)
    if u_range is None:
        u_range = (0.1, 3.0) if spec.u_lower == 0.0 else (-3.0, 3.0)
        if spec.u_upper == 0.0:
            u_range = (-3.0, -0.1)
    t = rng.uniform(*t_range, size=n_points)
    y = rng.uniform(*y_range, size=n_points)
    u = rng.uniform(*u_range, size=n_points)

    def cd(fun, x, which, h):
        def shift(s):
            args = [t, y, u]
            args[which] = args[which] + s
            return fun(*args)
        d1 = (shift(h) - shift(-h)) / (2 * h)
        d2 = (shift(h / 2) - shift(-h / 2)) / h
        return (4 * d2 - d1) / 3

    hy = 1e-3 * y
    hu = 1e-3 * np.abs(u)
    ht = 1e-3
    checks = {
        "fy": (spec.fy, cd(spec.f, None, 1, hy)),
        "fu": (spec.fu, cd(spec.f, None, 2, hu)),
        "fyy": (spec.fyy, cd(spec.fy, None, 1, hy)),
        "fuy": (spec.fuy, cd(spec.fy, None, 2, hu)),
        "fuu": (spec.fuu, cd(spec.fu, None, 2, hu)),
        "fty": (spec.fty, cd(spec.fy, None, 0, ht)),
    }
    out = {}
    for key, (exact_fn, approx) in checks.items():
        exact = exact_fn(t, y, u)
        scale = np.maximum(np.abs(exact), 1e-8 * np.maximum(1.0, np.abs(spec.fy(t, y, u))))
        out[key] = float(np.max(np.abs(exact - approx) / scale))
    return out


__all__ = ["AggregatorSpec", "AggregatorDomainError", "EZParams", "TimeAdditiveParams",
           "AssumptionProfile", "SampleGrid", "A1Report", "make_epstein_zin",
           "make_time_additive", "make_separable", "power_felicity", "operator_L",
           "elasticity_and_discount", "validate_a1", "derivative_check",
           "ez_regime_threshold"]
