import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hhklab.aggregators import (AggregatorDomainError, AssumptionProfile, EZParams, SampleGrid,
                                TimeAdditiveParams, derivative_check, elasticity_and_discount,
                                ez_regime_threshold, make_epstein_zin, make_separable,
                                make_time_additive, operator_L, power_felicity, validate_a1)
from hhklab.market_tree import MarketParams

MKT = MarketParams(r=0.02, lam=0.1, theta=0.5, T=1.0)
rng = np.random.default_rng(7)
Y = rng.uniform(0.2, 5.0, 200)
U = rng.uniform(0.1, 3.0, 200)


@pytest.mark.parametrize("spec", [
    make_epstein_zin(EZParams(0.2, 1.5, 0.5)),
    make_epstein_zin(EZParams(0.1, 0.7, 0.3)),
    make_time_additive(TimeAdditiveParams(0.05, 0.5)),
    make_separable(*power_felicity(0.3)[:1], 0.05),
])
def test_partials_match_finite_differences(spec):
    err = derivative_check(spec, n_points=200, seed=1)
    assert max(err.values()) <= 1e-6, err


@settings(max_examples=30, deadline=None)
@given(delta=st.floats(0.01, 1.0), alpha=st.floats(1.05, 3.0), rho=st.floats(0.05, 0.9))
def test_ez_elasticity_and_discount(delta, alpha, rho):
    spec = make_epstein_zin(EZParams(delta, alpha, rho))
    eps, rf = elasticity_and_discount(spec, Y, U)
    np.testing.assert_allclose(eps, alpha, rtol=1e-10)
    # rho_f is a difference of two large terms; allow roundoff relative to them
    scale = np.abs(spec.f(0.0, Y, U) * spec.fuy(0.0, Y, U) / spec.fy(0.0, Y, U)) + np.abs(spec.fu(0.0, Y, U))
    assert np.all(np.abs(rf - delta) <= 1e-13 * scale + 1e-12 * delta)


def test_ez_reduces_to_time_additive():
    rho = 0.4
    ez = make_epstein_zin(EZParams(0.3, 1 / rho, rho))
    ta = make_time_additive(TimeAdditiveParams(0.3, rho))
    np.testing.assert_allclose(ez.f(0.0, Y, U), ta.f(0.0, Y, U), rtol=1e-12)


def test_time_additive_quotients_and_cross_partial():
    spec = make_time_additive(TimeAdditiveParams(0.05, 0.5))
    eps, rf = elasticity_and_discount(spec, Y, U)
    np.testing.assert_allclose(eps, 2.0, rtol=1e-12)
    np.testing.assert_allclose(rf, 0.05, rtol=1e-12)
    assert np.all(spec.fuy(0.0, Y, U) == 0)
    assert np.all(spec.fu(0.0, Y, U) == -0.05)


@pytest.mark.parametrize("delta", [0.01, 0.1, 0.2, 0.5, 0.9])
def test_time_additive_operator_symbolic(delta):
    rho, beta = 0.5, 0.5
    spec = make_time_additive(TimeAdditiveParams(delta, rho))
    mu = MKT.r + MKT.risk_premium + beta * rho - delta
    got = operator_L(spec, MKT, beta, 0.0, Y, U)
    np.testing.assert_allclose(got, delta * Y ** (-rho) * mu, rtol=1e-10)


def test_ez_threshold_value():
    # unit elasticity value of the threshold
    assert ez_regime_threshold(1.0, MKT, 0.1) == pytest.approx(0.184872, abs=1e-6)
    spec = make_epstein_zin(EZParams(0.2, 1.05, 0.5))
    assert ez_regime_threshold(1.05, MKT, 0.1) < 0.2
    assert np.all(operator_L(spec, MKT, 0.1, 0.0, Y, U) <= 0)


@settings(max_examples=40, deadline=None)
@given(delta=st.floats(0.01, 0.6), alpha=st.floats(1.05, 3.0), rho=st.floats(0.05, 0.9),
       beta=st.floats(0.05, 1.0))
def test_ez_operator_sign_iff_threshold(delta, alpha, rho, beta):
    thr = ez_regime_threshold(alpha, MKT, beta)
    if abs(delta - thr) < 1e-6:
        return
    spec = make_epstein_zin(EZParams(delta, alpha, rho))
    L = operator_L(spec, MKT, beta, 0.0, Y, U)
    assert np.all(L <= 0) == (delta >= thr)


def test_separable_operator_negative_for_large_delta():
    spec = make_separable(*power_felicity(0.3)[:1], 2.0, *power_felicity(0.3)[1:])
    m = MarketParams(0.02, 0.0, 0.5, 1.0)
    assert np.all(operator_L(spec, m, 0.5, 0.0, Y, 0.0 * Y) < 0)


def test_validate_time_additive_passes():
    spec = make_time_additive(TimeAdditiveParams(0.05, 0.5))
    prof = AssumptionProfile(K=0.05, growth_alpha=0.49, p=1.01)
    rep = validate_a1(spec, prof, SampleGrid((0, 1), (0.01, 1.0), (-2, 2), 300), seed=0)
    assert rep.passed, rep.to_dict()
    assert rep.min_fy > 0 and rep.lipschitz_u <= 0.05 * (1 + 1e-9)


def test_validate_flags_linear_and_ez_domain():
    lin = make_separable(lambda t, y: y, 0.1, lambda t, y: 0 * y + 1.0, lambda t, y: 0 * y)
    prof = AssumptionProfile(K=10.0, growth_alpha=0.4, p=1.1)
    rep = validate_a1(lin, prof, SampleGrid((0, 1), (0.1, 2.0), (-1, 1)), seed=0)
    assert not rep.strictly_concave and not rep.passed
    ez = make_epstein_zin(EZParams(0.2, 1.5, 2.0))
    assert "ez_rho_gt_1_domain_u_negative" in ez.flags
    rep = validate_a1(ez, AssumptionProfile(K=10.0, growth_alpha=1 / 3, p=1.2),
                      SampleGrid((0, 1), (0.5, 2), (-1, 1)), seed=0)
    assert any(f.startswith("domain_restricted") for f in rep.flags)
    assert rep.to_json()


def test_validate_growth_alpha_mismatch_flagged():
    ez = make_epstein_zin(EZParams(0.2, 1.5, 0.5))
    rep = validate_a1(ez, AssumptionProfile(K=50.0, growth_alpha=0.3, p=1.2),
                      SampleGrid((0, 1), (0.5, 2), (0.5, 2)), seed=0)
    assert any("growth_alpha_mismatch" in f for f in rep.flags)


def test_separable_nonconcave_flag_and_params():
    spec = make_separable(lambda t, y: y ** 2, 0.1)
    assert "g_not_concave" in spec.flags
    with pytest.raises(ValueError):
        make_separable(lambda t, y: y, -1.0)
    with pytest.raises(ValueError):
        EZParams(0.1, 1.0, 0.5)
    with pytest.raises(ValueError):
        TimeAdditiveParams(0.1, 1.5)
    with pytest.raises(ValueError):
        AssumptionProfile(K=1.0, growth_alpha=0.4, p=2.0)
    assert AssumptionProfile(K=1.0, growth_alpha=0.25, p=1.5).q == pytest.approx(4.0)


def test_ez_domain_error():
    spec = make_epstein_zin(EZParams(0.2, 1.5, 0.5))
    with pytest.raises(AggregatorDomainError):
        spec.check_domain(1.0, -1.0)
    with pytest.raises(AggregatorDomainError):
        operator_L(spec, MKT, 0.1, 0.0, np.array([1.0]), np.array([-0.5]))


def test_zero_felicity():
    spec = make_separable(lambda t, y: 0 * y, 0.3, lambda t, y: 0 * y, lambda t, y: 0 * y)
    assert "g_not_increasing" in spec.flags
    assert np.all(spec.f(0.0, Y, 0 * Y) == 0)
