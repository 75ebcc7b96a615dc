import math
import warnings

import numpy as np
import pytest

from tcshadow import counterexample as cx
from tcshadow.cps import (
    PriceSystem,
    default_lambda_prime,
    dual_value_via_cps,
    find_cps,
    is_martingale,
)
from tcshadow.dual_solver import Deflator, dual_value, verify_deflator
from tcshadow.event_tree import MarketSpec, build_tree, random_market
from tcshadow.portfolio import LogUtility, PowerUtility, sample_admissible_strategy

LOG = LogUtility()


def quiet(fn, *args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args, **kw)


def martingale_market(lam=0.05):
    return MarketSpec(build_tree([("r", None, 1.0, 1.0), ("a", "r", 0.4, 1.3),
                                  ("b", "r", 0.6, 0.8)]), lam)


def increasing_market(lam):
    rows = [("r", None, 1.0, 1.0), ("a", "r", 1.0, 1.5), ("aa", "a", 1.0, 2.0)]
    return MarketSpec(build_tree(rows), lam)


def test_default_lambda_prime():
    assert default_lambda_prime(0.2) == 0.1


def test_martingale_market_trivial_cps():
    m = martingale_market()
    assert PriceSystem(np.ones(3), m.ask.copy()).check(m, 0.0)
    res = find_cps(m, 0.0)
    assert res.feasible and res.system.check(m, 0.0)


def test_truncated_counterexample_feasible():
    p = cx.CounterexampleParams()
    m = cx.build_market(p)
    res = find_cps(m, p.lam / 2)
    assert res.feasible and res.margin > 1e-9
    assert res.system.check(m, p.lam / 2)


def test_increasing_price_infeasible():
    assert not find_cps(increasing_market(0.1), 0.0).feasible
    assert not find_cps(increasing_market(0.1)).feasible
    # enough friction absorbs a deterministic rise of 100%
    assert find_cps(increasing_market(0.6), 0.55).feasible


def test_lambda_prime_range():
    with pytest.raises(ValueError):
        find_cps(martingale_market(), 1.0)


def test_monotone_feasibility():
    for seed in range(5):
        m = random_market(np.random.default_rng(seed), horizon=2, lam=0.04)
        grid = np.linspace(0.0, m.lam, 9)
        feas = [find_cps(m, lp).feasible for lp in grid]
        first = feas.index(True) if True in feas else len(feas)
        assert all(feas[first:])


def test_cps_scaled_is_deflator():
    for seed in range(5):
        m = random_market(np.random.default_rng(10 + seed), horizon=2, lam=0.04)
        z = find_cps(m).system
        for y in (0.5, 3.0):
            assert verify_deflator(m, Deflator(y * z.z0, y * z.z1)).ok


def test_superreplication_bound():
    rng = np.random.default_rng(0)
    for seed in range(5):
        m = random_market(np.random.default_rng(20 + seed), horizon=3, lam=0.03)
        z = find_cps(m).system
        leaves = m.tree.leaves
        for _ in range(20):
            g = sample_admissible_strategy(m, 1.0, rng).terminal_cash(m.tree)
            val = math.fsum(m.tree.prob[i] * z.z0[i] * gi for i, gi in zip(leaves, g))
            assert val <= 1.0 + 1e-9


def test_is_martingale():
    m = random_market(np.random.default_rng(1), horizon=2, lam=0.03)
    assert is_martingale(m.tree, np.full(m.tree.size, 4.2)).ok
    z = find_cps(m).system
    assert is_martingale(m.tree, z.z0).ok and is_martingale(m.tree, z.z1).ok
    p = cx.CounterexampleParams()
    cm = cx.build_market(p)
    rep = is_martingale(cm.tree, cx.closed_form_dual(p, cm).y0)
    assert not rep.ok and rep.drift[0] < 0
    with pytest.raises(ValueError):
        is_martingale(m.tree, np.ones(2))


def test_dual_via_cps_martingale_market():
    m = martingale_market()
    for y in (0.7, 1.0, 2.0):
        v, _ = quiet(dual_value_via_cps, m, LOG, y)
        assert v == pytest.approx(float(LOG.conjugate(y)), abs=1e-8)


def test_dual_via_cps_matches_deflator_program():
    for seed in range(4):
        m = random_market(np.random.default_rng(30 + seed), horizon=2, lam=0.03)
        for u in (LOG, PowerUtility(0.5)):
            a = quiet(dual_value, m, u, 1.0).value
            b, z = quiet(dual_value_via_cps, m, u, 1.0)
            assert abs(a - b) < 1e-6
            assert z.check(m, tol=1e-6)


def test_dual_via_cps_counterexample():
    p = cx.CounterexampleParams(N=10)
    m = cx.build_market(p)
    a = quiet(dual_value, m, LOG, 1.0).value
    b, _ = quiet(dual_value_via_cps, m, LOG, 1.0)
    assert abs(a - b) < 1e-6
