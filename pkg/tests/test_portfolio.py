import math

import numpy as np
import pytest

from tcshadow import counterexample as cx
from tcshadow.event_tree import MarketSpec, binomial_tree, build_tree, random_market
from tcshadow.portfolio import (
    DomainError,
    LogUtility,
    PowerUtility,
    Strategy,
    expected_utility,
    feasible_trade_interval,
    frictionless_wealth,
    is_admissible,
    is_self_financing,
    liquidation_value,
    parse_utility,
    sample_admissible_strategy,
    solvency_cones,
)


def one_period(lam=0.1):
    return MarketSpec(build_tree([("r", None, 1.0, 2.0), ("a", "r", 0.5, 3.0),
                                  ("b", "r", 0.5, 1.5)]), lam)


def test_liquidation_examples():
    assert liquidation_value(1.3, 0.0, 5.0, 0.4) == 1.3
    assert liquidation_value(10.0, -2.0, 4.0, 0.5) == 2.0
    lam, n = 0.2, 10
    cash = 1 - 2 / (1 + lam)
    got = liquidation_value(cash, 1 / (1 + lam), 1 + 1 / n, lam)
    assert got == pytest.approx(0.066667, abs=1e-6)
    for n in range(1, 200):
        assert liquidation_value(cash, 1 / (1 + lam), 1 + 1 / n, lam) > 0


def test_liquidation_bounded_by_frictionless():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x, y, a = rng.normal(), abs(rng.normal()), rng.uniform(0.5, 2)
        lam = rng.uniform(0, 0.5)
        assert liquidation_value(x, y, a, lam) <= x + y * a + 1e-15
    assert liquidation_value(1.0, 2.0, 3.0, 0.0) == 7.0


def test_self_financing_examples():
    m = one_period(0.1)
    tree = m.tree
    none = Strategy(1.0, np.zeros(3), np.zeros(3))
    rep = is_self_financing(none, m)
    assert rep.ok and rep.min_slack == 0.0
    d0, d1 = np.zeros(3), np.zeros(3)
    d1[0], d0[0] = 1.0, -2.0
    assert is_self_financing(Strategy(1.0, d0, d1), m).slack[0] == 0.0
    d0[0] = -1.9
    rep = is_self_financing(Strategy(1.0, d0, d1), m)
    assert not rep.ok and rep.slack[0] == pytest.approx(-0.1)
    assert tree.size == 3


def test_admissibility():
    m = one_period(0.1)
    assert is_admissible(Strategy(1.0, np.zeros(3), np.zeros(3)), m, 1.0)
    # holding a share at a leaf is not liquidated
    d0, d1 = np.zeros(3), np.zeros(3)
    d1[0], d0[0] = 0.2, -0.4
    assert not is_admissible(Strategy(1.0, d0, d1), m, 1.0)
    assert is_admissible(Strategy.from_share_path(m, 1.0, np.array([0.2, 0, 0])), m, 1.0)
    # too large a position goes negative in the down state
    assert not is_admissible(Strategy.from_share_path(m, 1.0, np.array([5.0, 0, 0])), m, 1.0)


def test_counterexample_strategies_admissibility():
    p = cx.CounterexampleParams()
    market = cx.build_market(p)
    assert is_admissible(cx.closed_form_primal(p, market).strategy, market, 1.0)
    shares = np.zeros(market.tree.size)
    shares[0] = 1.0
    s = Strategy.from_share_path(market, 1.0, shares)
    assert not is_admissible(s, market, 1.0)
    assert s.terminal_cash(market.tree).min() < 0


def test_cheaper_spread_keeps_self_financing():
    rng = np.random.default_rng(4)
    for seed in range(5):
        m = random_market(np.random.default_rng(seed), horizon=2, lam=0.04)
        s = sample_admissible_strategy(m, 1.0, rng)
        assert is_admissible(s, m, 1.0)
        for lam2 in (0.03, 0.01, 0.0):
            assert is_self_financing(s, m.with_lambda(lam2)).ok


def test_frictionless_equality_matches_wealth():
    m = random_market(np.random.default_rng(2), horizon=2, lam=0.0)
    tree = m.tree
    s = sample_admissible_strategy(m, 1.0, np.random.default_rng(0))
    assert np.all(np.abs(is_self_financing(s, m).slack) < 1e-12)
    _, post = s.positions(tree)
    w = frictionless_wealth(s, tree.ask, 1.0, tree)
    for i in range(tree.size):
        p = tree.parent[i]
        pre = (1.0, 0.0) if p < 0 else post[p]
        assert pre[0] + pre[1] * tree.ask[i] == pytest.approx(w[i], abs=1e-10)


def test_frictionless_wealth_buy_and_hold():
    tree = build_tree([("r", None, 1.0, 2.0), ("a", "r", 1.0, 3.0)])
    s = Strategy(1.0, np.array([-2.0, 3.0]), np.array([1.0, -1.0]))
    assert frictionless_wealth(s, tree.ask, 1.0, tree)[1] == 2.0
    assert frictionless_wealth(Strategy(1.0, np.zeros(2), np.zeros(2)), tree.ask, 1.0, tree)[1] == 1.0


def test_candidate_wealth_after_first_period():
    # unit share bought at the root of the counterexample, valued at the ask
    p = cx.CounterexampleParams()
    market = cx.build_market(p)
    tree = market.tree
    shares = np.zeros(tree.size)
    shares[0] = 1.0
    s = Strategy.from_share_path(market, 1.0, shares)
    w = frictionless_wealth(s, tree.ask, 1.0, tree)
    assert w[tree.index["u"]] == pytest.approx(2.0)
    for n in (1, 2, 7):
        assert w[tree.index[f"d{n}"]] == pytest.approx(1 / n)


def test_log_utility_values():
    u = LogUtility()
    assert u.value(1.0) == 0.0 and u.marginal(1.0) == 1.0 and u.conjugate(1.0) == -1.0
    assert u.conjugate(2.0) == pytest.approx(-math.log(2) - 1, abs=1e-15)
    assert u.inverse_marginal(u.marginal(3.0)) == pytest.approx(3.0)
    with pytest.raises(DomainError):
        u.value(0.0)
    assert u.value_or_sentinel(0.0) == -math.inf


def test_power_conjugate_matches_grid_sup():
    u = PowerUtility(0.5)
    xs = np.linspace(1e-6, 200, 2_000_001)
    for y in (0.3, 1.0, 2.5):
        brute = np.max(np.sqrt(xs) * 2 - xs * y)
        assert u.conjugate(y) == pytest.approx(brute, abs=1e-6)
    assert u.value_or_sentinel(0.0) == 0.0


def test_fenchel_inequality():
    rng = np.random.default_rng(0)
    for u in (LogUtility(), PowerUtility(0.5), PowerUtility(-1.0)):
        x = rng.uniform(0.05, 5, 500)
        y = rng.uniform(0.05, 5, 500)
        assert np.all(u.value(x) <= u.conjugate(y) + x * y + 1e-12)
        assert np.allclose(u.value(x), u.conjugate(u.marginal(x)) + x * u.marginal(x))


def test_parse_utility():
    assert isinstance(parse_utility("log"), LogUtility)
    assert parse_utility("power:0.5") == PowerUtility(0.5)
    assert parse_utility("power(-2)") == PowerUtility(-2.0)
    with pytest.raises(ValueError):
        parse_utility("exp")
    with pytest.raises(DomainError):
        parse_utility("power:1")


def test_expected_utility_sentinel():
    m = one_period(0.1)
    s = Strategy.from_share_path(m, 1.0, np.array([5.0, 0, 0]))
    assert expected_utility(s, m, LogUtility()) == -math.inf
    assert expected_utility(Strategy(1.0, np.zeros(3), np.zeros(3)), m, LogUtility()) == 0.0


def test_solvency_cones_and_trade_interval():
    m = one_period(0.1)
    c = solvency_cones(m)
    assert c.post_bid[0] == pytest.approx(0.9 * 1.5)
    assert c.post_ask[0] == pytest.approx(3.0)
    lo, hi = feasible_trade_interval(1.0, 0.0, 2.0, 0.1, c.post_bid[0], c.post_ask[0])
    # buying d: 1 - 2d + 1.35 d >= 0; selling: 1 + 1.8 d' - 3 d' >= 0
    assert hi == pytest.approx(1 / 0.65)
    assert lo == pytest.approx(-1 / 1.2)
    assert feasible_trade_interval(-1.0, 0.0, 2.0, 0.1, c.post_bid[0], c.post_ask[0]) is None


def test_sampled_strategies_are_admissible():
    rng = np.random.default_rng(7)
    for seed in range(10):
        m = random_market(np.random.default_rng(seed), horizon=3, lam=0.02)
        for _ in range(5):
            s = sample_admissible_strategy(m, 1.0, rng)
            assert is_admissible(s, m, 1.0)
            assert s.terminal_cash(m.tree).min() >= 0


def test_strategy_dict_round_trip():
    m = MarketSpec(binomial_tree(1.0, 1.2, 0.9, 0.5, 2), 0.05)
    s = sample_admissible_strategy(m, 1.0, np.random.default_rng(0))
    back = Strategy.from_dict(s.to_dict(m.tree), m.tree)
    assert np.array_equal(back.dphi0, s.dphi0) and np.array_equal(back.dphi1, s.dphi1)
    d = s.to_dict(m.tree)
    d["trades"] = d["trades"][:-1]
    with pytest.raises(ValueError):
        Strategy.from_dict(d, m.tree)
