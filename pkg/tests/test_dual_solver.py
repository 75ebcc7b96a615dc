import math
import warnings

import numpy as np
import pytest

from conftest import suite_case
from tcshadow import counterexample as cx
from tcshadow.cps import find_cps
from tcshadow.dual_solver import (
    Deflator,
    deflator_dual_value,
    dual_value,
    extract_deflator,
    verify_deflator,
    verify_local_shadow,
    verify_optimality_relations,
    verify_trade_alignment,
)
from tcshadow.event_tree import MarketSpec, build_tree, random_market
from tcshadow.portfolio import LogUtility, PowerUtility, Strategy
from tcshadow.primal_solver import Solution, conditional_value, engine_for, solve_frictional

LOG = LogUtility()
POW = PowerUtility(0.5)


def quiet_dual(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return dual_value(*args, **kw)


def martingale_market(lam=0.05):
    return MarketSpec(build_tree([("r", None, 1.0, 1.0), ("a", "r", 0.4, 1.3),
                                  ("b", "r", 0.6, 0.8)]), lam)


def test_martingale_market_deflator_is_density_and_price():
    m = martingale_market()
    sol = solve_frictional(m, LOG, 1.0)
    d = extract_deflator(m, LOG, sol)
    assert np.allclose(d.y0, 1.0, atol=1e-14)
    assert np.allclose(d.y1, m.ask, atol=1e-14)
    dual = quiet_dual(m, LOG, 1.0)
    assert dual.value == pytest.approx(-1.0, abs=1e-8)


def test_counterexample_root_deflator():
    p = cx.CounterexampleParams()
    d = cx.closed_form_dual(p)
    assert (d.y0[0], d.y1[0]) == (1.0, 2.0)
    for N, tol in ((10, 1e-9), (30, 1e-6)):
        m = cx.build_market(p.with_N(N))
        sol = solve_frictional(m, LOG, 1.0)
        d = extract_deflator(m, LOG, sol)
        # at N = 30 the lowest leaf holds 2.6e-11 of cash, so rounding reaches ~4e-7
        assert (d.y0[0], d.y1[0]) == pytest.approx((1.0, 2.0), abs=tol)
        assert np.allclose(d.y0[m.tree.leaves], 1 / sol.terminal_cash, rtol=1e-14)


def test_deflator_finite_difference_oracle():
    h = 1e-5
    for seed in range(3):
        m = random_market(np.random.default_rng(60 + seed), horizon=2, lam=0.03)
        for u in (LOG, POW):
            sol = solve_frictional(m, u, 1.0)
            d = extract_deflator(m, u, sol)
            pre, _ = sol.strategy.positions(m.tree)
            for i in range(m.tree.size):
                c, s = pre[i]
                fd = (conditional_value(m, u, i, c + h, s) - conditional_value(m, u, i, c - h, s)) / (2 * h)
                assert fd == pytest.approx(d.y0[i], abs=1e-5)


def test_dual_program_matches_primal():
    for seed in range(3):
        m = random_market(np.random.default_rng(70 + seed), horizon=2, lam=0.03)
        for u in (LOG, POW):
            sol = solve_frictional(m, u, 1.0)
            y = extract_deflator(m, u, sol).y
            dual = quiet_dual(m, u, y)
            assert abs(dual.value + y - sol.value) < 1e-7
            rep = verify_optimality_relations(m, u, 1.0, sol, dual)
            assert rep.checks["conjugacy"]["ok"]
            assert verify_deflator(m, dual.deflator).ok


def test_dual_first_component_unique_across_solvers():
    m = random_market(np.random.default_rng(80), horizon=2, lam=0.03)
    sol = solve_frictional(m, LOG, 1.0)
    y = extract_deflator(m, LOG, sol).y
    a = quiet_dual(m, LOG, y, solver="CLARABEL")
    b = quiet_dual(m, LOG, y, solver="SCS")
    leaves = m.tree.leaves
    assert np.max(np.abs(a.deflator.y0[leaves] - b.deflator.y0[leaves])) < 1e-4
    # the reference solver is much tighter than the first-order one
    assert np.max(np.abs(a.deflator.y0[leaves] - 1 / sol.terminal_cash)) < 1e-6


def test_log_dual_scaling():
    m = random_market(np.random.default_rng(81), horizon=2, lam=0.03)
    v1 = quiet_dual(m, LOG, 1.0).value
    for y in (0.5, 2.0):
        assert quiet_dual(m, LOG, y).value == pytest.approx(v1 - math.log(y), abs=1e-7)


def test_dual_convex_decreasing_and_minimum():
    m = random_market(np.random.default_rng(82), horizon=2, lam=0.03)
    sol = solve_frictional(m, POW, 1.0)
    ys = np.linspace(0.6, 1.6, 11)
    v = np.array([quiet_dual(m, POW, y).value for y in ys])
    assert np.all(np.diff(v) < 0)
    assert np.all(np.diff(v, 2) > -1e-8)
    assert np.min(v + ys) >= sol.value - 1e-7
    yhat = extract_deflator(m, POW, sol).y
    assert quiet_dual(m, POW, yhat).value + yhat == pytest.approx(sol.value, abs=1e-7)


def test_closed_form_dual_strict_supermartingale():
    p = cx.CounterexampleParams()
    m = cx.build_market(p)
    d = cx.closed_form_dual(p, m)
    rep = verify_deflator(m, d, cones=cx.infinite_cones(p, m))
    assert rep.ok
    assert rep.root_drift[0] < -1e-6
    # the truncated market's cap is looser than the limit, so its cone rejects the root
    trunc = verify_deflator(m, d)
    assert not trunc.certificate
    assert {v[1] for v in trunc.violations if v[0].startswith("delta")} == {"r"}


def test_closed_form_dual_node_values():
    p = cx.CounterexampleParams()
    m = cx.build_market(p)
    d = cx.closed_form_dual(p, m)
    u = m.tree.index["u"]
    assert (d.y0[u], d.y1[u]) == pytest.approx((0.545455, 1.636364), abs=1e-6)
    assert d.ratio[u] == pytest.approx(3.0)


def test_cps_passes_with_zero_drift():
    m = random_market(np.random.default_rng(83), horizon=2, lam=0.04)
    z = find_cps(m).system
    rep = verify_deflator(m, Deflator(2.5 * z.z0, 2.5 * z.z1))
    assert rep.ok
    assert abs(rep.root_drift[0]) < 1e-10


def test_ratio_outside_spread_located():
    m = martingale_market()
    d = Deflator(np.ones(3), m.ask.copy())
    d.y1[1] = 2.0
    rep = verify_deflator(m, d)
    assert not rep.ok and not rep.in_spread
    assert ("spread", "a", 2.0) in rep.violations


def test_relations_on_frictionless_reduction():
    m = random_market(np.random.default_rng(84), horizon=2, lam=0.0)
    sol = solve_frictional(m, LOG, 1.0)
    d = extract_deflator(m, LOG, sol)
    rep = verify_optimality_relations(m, LOG, 1.0, sol, d)
    assert rep.ok, rep.failed
    assert np.allclose(d.ratio, m.ask, rtol=1e-12)


def test_relations_on_counterexample_closed_form():
    p = cx.CounterexampleParams()
    m = cx.build_market(p)
    cf = cx.closed_form_primal(p, m)
    d = cx.closed_form_dual(p, m)
    fake = Solution(cf.value_truncated, cf.strategy, m, LOG, 1.0, np.zeros(m.tree.size), 0, 0.0)
    rep = verify_optimality_relations(m, LOG, 1.0, fake, d, k=0)
    for name in ("marginal_utility", "budget"):
        assert rep.checks[name]["residual"] < 1e-10, name


def test_perturbed_strategy_fails_relations():
    m = random_market(np.random.default_rng(85), horizon=2, lam=0.03)
    sol = solve_frictional(m, LOG, 1.0)
    d = extract_deflator(m, LOG, sol)
    shares = sol.strategy.shares(m.tree).copy()
    shares[0] += 0.01
    bad = Strategy.from_share_path(m, 1.0, shares)
    fake = Solution(sol.value, bad, m, LOG, 1.0, sol.node_values, 0, 0.0)
    rep = verify_optimality_relations(m, LOG, 1.0, fake, d)
    assert not rep.checks["marginal_utility"]["ok"]
    assert rep.checks["marginal_utility"]["residual"] > 1e-4


def test_trade_alignment_counterexample():
    p = cx.CounterexampleParams()
    m = cx.build_market(p)
    cf = cx.closed_form_primal(p, m)
    fake = Solution(cf.value_truncated, cf.strategy, m, LOG, 1.0, np.zeros(m.tree.size), 0, 0.0)
    rep = verify_trade_alignment(m, fake, cx.closed_form_dual(p, m))
    assert rep.ok, rep.checks


def test_trade_alignment_vacuous_for_martingale():
    m = martingale_market()
    sol = solve_frictional(m, LOG, 1.0)
    rep = verify_trade_alignment(m, sol, extract_deflator(m, LOG, sol))
    assert rep.checks["buy_at_ask"]["residual"] == 0 and rep.checks["sell_at_bid"]["residual"] == 0


def test_trade_alignment_random_trading_tree():
    market, _, primal, defl, _ = suite_case(4, "log")
    assert np.any(np.abs(primal.strategy.dphi1[market.tree.internal]) > 1e-6)
    assert verify_trade_alignment(market, primal, defl).ok


def test_local_shadow_counterexample_root():
    p = cx.CounterexampleParams()
    m = cx.build_market(p)
    eng = engine_for(m, LOG)
    base = eng.value(0, 1.0, 0.0)
    nu = 0.05
    # Y1/Y0 = 2 at the root; along the ask line the deviation is value-neutral
    assert eng.value(0, 1.0 - 2 * nu, nu) <= base + 1e-14
    sol = solve_frictional(m, LOG, 1.0)
    rep = verify_local_shadow(m, LOG, 1.0, sol, extract_deflator(m, LOG, sol))
    assert rep.ok and rep.zero_residual == 0.0 and rep.vacuous > 0


def test_deflator_dual_value_and_dict():
    m = martingale_market()
    d = Deflator(np.ones(3), m.ask.copy())
    assert deflator_dual_value(m, LOG, d) == -1.0
    back = Deflator.from_dict(d.to_dict(m.tree), m.tree)
    assert np.array_equal(back.y0, d.y0) and np.array_equal(back.y1, d.y1)


def test_dual_rejects_bad_scale():
    with pytest.raises(ValueError):
        dual_value(martingale_market(), LOG, 0.0)
