import warnings

import numpy as np
import pytest

from conftest import suite_case, suite_cases
from tcshadow import counterexample as cx
from tcshadow.cps import is_martingale
from tcshadow.dual_solver import deflator_dual_value, dual_value, extract_deflator, verify_deflator
from tcshadow.event_tree import MarketSpec, build_tree, random_market
from tcshadow.portfolio import LogUtility
from tcshadow.primal_solver import solve_frictional
from tcshadow.shadow import (
    ShadowCandidate,
    candidate_from_dual,
    frictionless_arbitrage_check,
    frictionless_dual,
    verify_shadow,
)

LOG = LogUtility()


def martingale_market(lam=0.05):
    return MarketSpec(build_tree([("r", None, 1.0, 1.0), ("a", "r", 0.4, 1.3),
                                  ("b", "r", 0.6, 0.8)]), lam)


def test_arbitrage_check():
    m = martingale_market()
    assert frictionless_arbitrage_check(m.tree, m.ask).arbitrage_free
    price = m.ask.copy()
    price[2] = 1.1
    verdict = frictionless_arbitrage_check(m.tree, price)
    assert not verdict.arbitrage_free and verdict.nodes == ["r"]


def test_counterexample_candidate_arbitrage_free():
    p = cx.CounterexampleParams()
    m = cx.build_market(p)
    cand = cx.fixed_candidate(p, m)
    assert frictionless_arbitrage_check(m.tree, cand.price).arbitrage_free
    t = m.tree.time
    assert np.array_equal(cand.price[t < 2], m.ask[t < 2])
    assert np.array_equal(cand.price[t == 2], m.bid[t == 2])


def test_candidate_from_dual_ratio():
    market, _, _, defl, _ = suite_case(0, "log")
    cand = candidate_from_dual(market, defl)
    assert np.allclose(cand.price, defl.y1 / defl.y0)


def test_martingale_market_candidate_is_ask():
    m = martingale_market()
    sol = solve_frictional(m, LOG, 1.0)
    cand = candidate_from_dual(m, extract_deflator(m, LOG, sol))
    assert np.allclose(cand.price, m.ask)
    verdict = verify_shadow(m, LOG, 1.0, cand, primal=sol)
    assert verdict.exists and verdict.alignment["ok"]


def test_random_finite_trees_have_shadow_price():
    for seed, name in suite_cases():
        market, u, primal, defl, _ = suite_case(seed, name)
        verdict = verify_shadow(market, u, 1.0, candidate_from_dual(market, defl),
                                primal=primal, deflator=defl)
        assert verdict.exists, (seed, name, verdict.margin)
        assert abs(verdict.margin) < 1e-7


def test_martingale_minimizer_implies_existence():
    for seed in range(5):
        m = random_market(np.random.default_rng(300 + seed), horizon=3, lam=0.03)
        sol = solve_frictional(m, LOG, 1.0)
        d = extract_deflator(m, LOG, sol)
        if is_martingale(m.tree, d.y0).ok and is_martingale(m.tree, d.y1).ok:
            assert verify_shadow(m, LOG, 1.0, candidate_from_dual(m, d), primal=sol).exists


def test_existence_gives_deflator_attaining_dual():
    for seed in range(4):
        m = random_market(np.random.default_rng(310 + seed), horizon=2, lam=0.03)
        sol = solve_frictional(m, LOG, 1.0)
        d = extract_deflator(m, LOG, sol)
        verdict = verify_shadow(m, LOG, 1.0, candidate_from_dual(m, d), primal=sol)
        assert verdict.exists
        fd = frictionless_dual(verdict.frictionless)
        assert verify_deflator(m, fd).ok
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            best = dual_value(m, LOG, fd.y).value
        assert abs(deflator_dual_value(m, LOG, fd) - best) < 1e-6


def test_lambda_zero_shadow_is_ask():
    m = random_market(np.random.default_rng(5), horizon=2, lam=0.0)
    sol = solve_frictional(m, LOG, 1.0)
    verdict = verify_shadow(m, LOG, 1.0, ShadowCandidate(m.ask.copy(), "ask"), primal=sol)
    assert verdict.exists
    assert verdict.frictional_value == pytest.approx(verdict.frictionless_value, abs=1e-12)


def test_counterexample_fixed_candidate_is_not_shadow():
    p = cx.CounterexampleParams()
    m = cx.build_market(p)
    verdict = verify_shadow(m, LOG, 1.0, cx.fixed_candidate(p, m))
    assert not verdict.exists
    assert verdict.margin > 1e-4
    assert verdict.frictionless_value > verdict.frictional_value


def test_negative_verdict_has_positive_margin():
    # a candidate inside the spread that is far from optimal
    for seed in range(5):
        m = random_market(np.random.default_rng(320 + seed), horizon=2, lam=0.05)
        price = 0.5 * (m.ask + m.bid)
        if not frictionless_arbitrage_check(m.tree, price).arbitrage_free:
            continue
        verdict = verify_shadow(m, LOG, 1.0, ShadowCandidate(price, "mid"))
        if not verdict.exists:
            assert verdict.margin > 0 or not verdict.alignment["ok"]
            assert verdict.margin > -1e-12


def test_candidate_outside_spread_rejected():
    m = martingale_market()
    sol = solve_frictional(m, LOG, 1.0)
    d = extract_deflator(m, LOG, sol)
    d.y1[1] = 5 * d.y0[1]
    with pytest.raises(ValueError):
        candidate_from_dual(m, d)


def test_verdict_dict():
    market, u, primal, defl, _ = suite_case(1, "log")
    verdict = verify_shadow(market, u, 1.0, candidate_from_dual(market, defl), primal=primal,
                            deflator=defl)
    d = verdict.to_dict(market.tree)
    assert d["exists"] is True and set(d["candidate"]["price"]) == set(market.tree.ids)
