import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hhklab.aggregators import (EZParams, TimeAdditiveParams, make_epstein_zin, make_separable,
                                make_time_additive, power_felicity)
from hhklab.bsde import solve_utility
from hhklab.foc import (check_foc, conditional_flatoff, discount_weight, dpp_check, evaluate,
                        first_hitting, free_interval_residual, gradient, gradient_fd, shadow,
                        solve_multiplier, stop_at_first_jump, stop_at_time, structural_audit)
from hhklab.market_tree import MarketParams, TimeGrid, budget, build_tree, node_from_pattern
from hhklab.plans import ConsumptionPlan, PlanError, SatisfactionKernel, satisfaction
from hhklab.policies import all_at_zero

from oracles import discrete_optimum_separable

TA = make_time_additive(TimeAdditiveParams(0.05, 0.5))
EZ = make_epstein_zin(EZParams(0.2, 1.5, 0.5))


def lump_plan(tree, lump):
    return ConsumptionPlan(tree.n_steps, lump, np.zeros(tree.size))


@pytest.fixture(scope="module")
def optimum():
    """Exact discrete optimum of a separable problem with interior lumps."""
    m = MarketParams(0.02, 0.1, 0.5, 4.0)
    tree = build_tree(m, TimeGrid(10, 4.0))
    ker = SatisfactionKernel(0.1, 1.0)
    M = 0.03
    plan = lump_plan(tree, discrete_optimum_separable(tree, TA, ker, M))
    return m, tree, ker, M, plan, budget(tree, plan)


@pytest.mark.parametrize("spec,node", [(TA, 0), (EZ, 0), (TA, 5), (EZ, 2)])
def test_gradient_matches_finite_difference(spec, node):
    m = MarketParams(0.02, 0.1, 0.5, 1.0)
    tree = build_tree(m, TimeGrid(8, 1.0))
    ker = SatisfactionKernel(0.5, 1.0)
    rng = np.random.default_rng(3)
    rate = rng.exponential(0.3, tree.size)
    rate[tree.leaves] = 0
    plan = ConsumptionPlan(8, rng.exponential(0.05, tree.size), rate)
    res = gradient_fd(tree, plan, spec, ker, node=node)
    assert res["rel_err"] <= 1e-6, res


def test_gradient_fd_separable_zero_plan_power():
    m = MarketParams(0.02, 0.1, 0.5, 1.0)
    tree = build_tree(m, TimeGrid(10, 1.0))
    spec = make_separable(*power_felicity(0.3)[:1], 0.05)
    res = gradient_fd(tree, ConsumptionPlan.zero(tree), spec, SatisfactionKernel(1.0, 1.0),
                      eps_list=(1e-4,))
    assert res["rel_err"] <= 1e-3


def test_tabulated_kernel_gradient():
    m = MarketParams(0.02, 0.1, 0.5, 1.0)
    n = 6
    tree = build_tree(m, TimeGrid(n, 1.0))
    beta = 0.8
    th = np.array([[beta * math.exp(-beta * (i - j) / n) if j <= i else 0.0
                    for j in range(n + 1)] for i in range(n + 1)])
    plan = all_at_zero(tree, 0.4)
    ev1 = evaluate(tree, plan, EZ, SatisfactionKernel(0.3, beta))
    ev2 = evaluate(tree, plan, EZ, SatisfactionKernel(0.3, beta, theta_table=th))
    np.testing.assert_allclose(ev1.nablaV[:tree.leaves.start], ev2.nablaV[:tree.leaves.start],
                               rtol=1e-12)
    res = gradient_fd(tree, plan, EZ, SatisfactionKernel(0.3, beta, theta_table=th), node=4)
    assert res["rel_err"] <= 1e-6


def test_discount_weight_is_exponential_for_separable():
    m = MarketParams(0.02, 0.1, 0.5, 1.0)
    tree = build_tree(m, TimeGrid(6, 1.0))
    ev = evaluate(tree, all_at_zero(tree, 1.0), TA, SatisfactionKernel(0.1, 1.0))
    D = discount_weight(tree, ev.Y, ev.U, TA).D
    np.testing.assert_allclose(D, np.exp(-0.05 * tree.t), rtol=1e-13)


def test_discount_weight_ez_against_fine_grid():
    # deterministic Y: D_t = exp(int_0^t f_u ds), compared with a fine-grid quadrature
    m = MarketParams(0.02, 0.0, 0.5, 1.0)
    errs = []
    ref = None
    for n in (8, 16):
        tree = build_tree(m, TimeGrid(n, 1.0))
        ev = evaluate(tree, all_at_zero(tree, 1.0), EZ, SatisfactionKernel(1.0, 0.5))
        D = discount_weight(tree, ev.Y, ev.U, EZ).D
        if ref is None:
            from hhklab.bsde import solve_path
            nf = 4096
            tf = np.linspace(0, 1, nf + 1)
            Yf = 1.5 * np.exp(-0.5 * tf)
            Uf = solve_path(tf, Yf, EZ)
            fu = EZ.fu(tf[:-1], Yf[:-1], Uf[:-1])
            ref = np.exp(np.concatenate([[0], np.cumsum(fu / nf)]))
        half = node_from_pattern("0" * (n // 2))
        errs.append(abs(D[half] - ref[nf // 2]))
    assert errs[1] < errs[0] <= 0.1


def test_shadow_fields():
    m = MarketParams(0.02, 0.1, 0.5, 1.0)
    tree = build_tree(m, TimeGrid(5, 1.0))
    ev = evaluate(tree, all_at_zero(tree, 1.0), TA, SatisfactionKernel(0.1, 1.0))
    sh = shadow(tree, ev.Y, ev.U, TA, m, ev.nablaV)
    np.testing.assert_allclose(sh.F_tilde, ev.nablaV * np.exp(m.psi_drift * tree.t))
    assert np.all(sh.F > 0)


def test_lump_at_zero_regime_passes():
    m = MarketParams(0.02, 0.1, 0.5, 1.0)
    spec = make_time_additive(TimeAdditiveParams(0.9, 0.5))
    ker = SatisfactionKernel(0.1, 0.5)
    tree = build_tree(m, TimeGrid(10, 1.0))
    plan = all_at_zero(tree, 1.0)
    ev = evaluate(tree, plan, spec, ker)
    M, spread = solve_multiplier(tree, plan, spec, ker, ev=ev)
    assert M == pytest.approx(ev.nablaV[0]) and spread == 0.0
    rep = check_foc(tree, plan, M, 1.0, spec, ker, m, ev=ev)
    assert rep.passed, rep.to_dict()
    # moving the lump to the first step breaks the conditions
    lump = np.zeros(tree.size)
    lump[1] = lump[2] = 1.0 / (tree.psi[1] * tree.prob[1] + tree.psi[2] * tree.prob[2])
    moved = lump_plan(tree, lump)
    M2 = solve_multiplier(tree, moved, spec, ker)[0]
    assert not check_foc(tree, moved, M2, 1.0, spec, ker, m).passed


def test_multiplier_increases_when_scaled_down():
    m = MarketParams(0.02, 0.1, 0.5, 1.0)
    tree = build_tree(m, TimeGrid(6, 1.0))
    ker = SatisfactionKernel(0.1, 1.0)
    Ms = [solve_multiplier(tree, all_at_zero(tree, w), EZ, ker)[0] for w in (1.0, 0.5, 0.25)]
    assert Ms[0] < Ms[1] < Ms[2]
    with pytest.raises(PlanError):
        solve_multiplier(tree, ConsumptionPlan.zero(tree), EZ, ker)


def test_discrete_optimum_passes_foc(optimum):
    m, tree, ker, M, plan, w = optimum
    rep = check_foc(tree, plan, M, w, TA, ker, m)
    assert rep.passed, rep.to_dict()
    assert abs(rep.max_violation) <= 1e-10 and abs(rep.flatoff) <= 1e-10
    # the exact discrete optimum does lump at interior quiet nodes
    assert len(rep.interior_nojump_lumps) > 0
    assert rep.to_json()


def test_perturbed_optimum_fails_foc(optimum):
    m, tree, ker, M, plan, w = optimum
    lump = plan.lump.copy()
    k = node_from_pattern("0000")
    lump[k] += 0.05
    bad = lump_plan(tree, lump)
    rep = check_foc(tree, bad, M, budget(tree, bad), TA, ker, m)
    assert rep.max_violation > 1e-6 or rep.flatoff > 1e-6


def test_conditional_flatoff_of_optimum(optimum):
    m, tree, ker, M, plan, w = optimum
    for stop in (stop_at_first_jump(tree), stop_at_time(tree, 3)):
        res = conditional_flatoff(tree, plan, M, stop, TA, ker)
        assert res["max_abs"] <= 1e-12 * M


def test_dpp_on_optimum_and_on_suboptimal_plan(optimum):
    m, tree, ker, M, plan, w = optimum
    res = dpp_check(tree, plan, M, stop_at_first_jump(tree), 20, 0, TA, ker)
    assert res["worst_gap"] >= -1e-12 * res["scale"]
    # lumping everything at zero is not optimal on this horizon
    alt = all_at_zero(tree, w)
    res = dpp_check(tree, alt, M, stop_at_time(tree, 0), 20, 0, TA, ker)
    assert res["worst_gap"] < 0


def test_dpp_include_self_gives_zero_gap(optimum):
    m, tree, ker, M, plan, w = optimum
    res = dpp_check(tree, plan, M, stop_at_first_jump(tree), 1, 0, TA, ker, include_self=True)
    assert res["worst_gap"] == 0.0


def test_first_hitting_partitions_paths():
    tree = build_tree(MarketParams(0.02, 0.1, 0.5, 1.0), TimeGrid(6, 1.0))
    hit = first_hitting(tree, stop_at_first_jump(tree))
    # every path is stopped exactly once: hitting probabilities sum to one
    assert tree.prob[hit].sum() == pytest.approx(1.0)
    assert hit[2] and not hit[1]


def test_structural_audit_flags():
    m = MarketParams(0.02, 0.1, 0.5, 1.0)
    tree = build_tree(m, TimeGrid(5, 1.0))
    ker = SatisfactionKernel(0.1, 1.0)
    lump = np.zeros(tree.size)
    lump[0] = 1.0
    lump[1] = 0.5   # quiet step
    lump[2] = 0.5   # jump
    plan = lump_plan(tree, lump)
    res = structural_audit(tree, plan, 1e3, TA, ker, m)
    assert res["interior_nojump_lumps"] == [1]
    assert set(res["lump_inequality_violations"]) == {0, 1, 2}
    res = structural_audit(tree, all_at_zero(tree, 1.0), 1e-6, TA, ker, m)
    assert res == {"lump_inequality_violations": [], "interior_nojump_lumps": []}


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), w=st.sampled_from([0.25, 0.5, 0.75]))
def test_concavity_random_pairs(seed, w):
    m = MarketParams(0.02, 0.1, 0.5, 1.0)
    tree = build_tree(m, TimeGrid(6, 1.0))
    ker = SatisfactionKernel(0.5, 1.0)
    rng = np.random.default_rng(seed)
    plans = []
    for _ in range(2):
        rate = rng.exponential(0.5, tree.size)
        rate[tree.leaves] = 0
        plans.append(ConsumptionPlan(6, rng.exponential(0.1, tree.size), rate))
    for spec in (TA, EZ):
        ua, ub = (solve_utility(tree, satisfaction(tree, p, ker), spec)[0].U0 for p in plans)
        mix = ConsumptionPlan(6, w * plans[0].lump + (1 - w) * plans[1].lump,
                              w * plans[0].rate + (1 - w) * plans[1].rate)
        um = solve_utility(tree, satisfaction(tree, mix, ker), spec)[0].U0
        assert um >= w * ua + (1 - w) * ub + 1e-6 * max(abs(ua), abs(ub))


def test_check_foc_rejects_bad_multiplier():
    tree = build_tree(MarketParams(0.02, 0.1, 0.5, 1.0), TimeGrid(3, 1.0))
    with pytest.raises(ValueError):
        check_foc(tree, all_at_zero(tree, 1.0), 0.0, 1.0, TA, SatisfactionKernel(0.1, 1.0),
                  MarketParams(0.02, 0.1, 0.5, 1.0))
