"""Primal utility maximization on a finite tree, with and without costs.

The frictional solver runs backward induction on the conditional value
function.  Homotheticity of log/power utility reduces each node to two scalar
problems solved once: the best post-trade share ratio ``m_buy`` on the line of
positions reachable by buying at the ask, and ``m_sell`` on the line reachable
by selling at the bid.  A pre-trade position is then handled by comparing its
ratio with these targets:

* ``shares / ask_wealth < m_buy``  -> buy up to the target,
* ``shares / bid_wealth > m_sell`` -> sell down to the target,
* otherwise no trade.

Each scalar problem is concave; it is solved by bisection on the exact right
directional derivative of the continuation value, which gives the maximizer to
machine precision including at kinks and caps.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .event_tree import EventTree, MarketSpec, ensure_valid
from .portfolio import (
    Strategy,
    Utility,
    expected_utility,
    feasible_trade_interval,
    liquidation_value,
    solvency_cones,
    trade_cost,
)

BUY, SELL, HOLD, DIRECT = "buy", "sell", "hold", "direct"
UNBOUNDED = 1e8  # artificial cap (in units of wealth / price) for unbounded cone sides
MAX_BISECT = 400


class SolverError(RuntimeError):
    """Non-convergence or an inconsistent intermediate result."""


class NoCPSError(ValueError):
    """The market admits no consistent price system for the requested spread."""


class ArbitrageError(ValueError):
    """The (frictionless or frictional) market admits an arbitrage."""


def _bisect_sup(deriv, lo: float, hi: float) -> tuple[float, int]:
    """sup{m in (lo, hi): deriv(m) > 0} for a nonincreasing ``deriv``."""
    a, b = lo, hi
    it = 0
    if a < 0.0 < b:
        # zero holdings is a kink of every leaf value; bracket it exactly
        d = deriv(0.0)
        it += 1
        if math.isnan(d):
            raise SolverError("NaN derivative during line search")
        if d > 0:
            a = 0.0
        else:
            b = 0.0
    while it < MAX_BISECT:
        mid = a + 0.5 * (b - a)
        if not a < mid < b:
            break
        d = deriv(mid)
        if math.isnan(d):
            raise SolverError("NaN derivative during line search")
        if d > 0:
            a = mid
        else:
            b = mid
        it += 1
    if b == 0.0 and a >= -1e-14 * (hi - lo):
        return 0.0, it
    return a + 0.5 * (b - a), it


class Engine:
    """Backward-induction state for one market and utility.

    All per-node arrays follow the tree's breadth-first order.
    """

    def __init__(self, market: MarketSpec, utility: Utility):
        self.market = market
        self.tree = market.tree
        self.u = utility
        self.ask = np.asarray(market.ask, dtype=float)
        self.bid = np.asarray(market.bid, dtype=float)
        self.cones = solvency_cones(market)
        n = self.tree.size
        self.m_buy = np.full(n, np.nan)
        self.buy_val = np.full(n, np.nan)
        self.m_sell = np.full(n, np.nan)
        self.sell_val = np.full(n, np.nan)
        self.iterations = 0
        for i in reversed(range(n)):
            if self.tree.children[i]:
                self._targets(i)

    # -- value and derivative ------------------------------------------------
    def regime(self, i: int, c: float, s: float) -> str:
        wa = c + s * self.ask[i]
        wb = c + s * self.bid[i]
        if wa > 0 and wb > 0:
            if s / wa < self.m_buy[i]:
                return BUY
            if s / wb > self.m_sell[i]:
                return SELL
            return HOLD
        return DIRECT

    def regime_along(self, i: int, c: float, s: float, d0: float, d1: float) -> str:
        """Regime entered when moving from ``(c, s)`` along ``(d0, d1)``; differs from
        :meth:`regime` only on the boundary of the no-trade region."""
        r = self.regime(i, c, s)
        if r != HOLD:
            return r
        wa = c + s * self.ask[i]
        wb = c + s * self.bid[i]
        if s == wa * self.m_buy[i] and d1 * wa - s * (d0 + d1 * self.ask[i]) < 0:
            return BUY
        if s == wb * self.m_sell[i] and d1 * wb - s * (d0 + d1 * self.bid[i]) > 0:
            return SELL
        return HOLD

    def value(self, i: int, c: float, s: float) -> float:
        """Conditional value U_i at pre-trade holdings ``(c, s)``; ``-inf`` if insolvent."""
        u = self.u
        if not self.tree.children[i]:
            return u.value_or_sentinel(liquidation_value(c, s, self.ask[i], self.market.lam))
        g = self.cones.gauge_pre(i, c, s)
        if g < 0 or (g == 0 and not u.closed_domain):
            return -math.inf
        r = self.regime(i, c, s)
        if r == BUY:
            return u.scale(self.buy_val[i], c + s * self.ask[i])
        if r == SELL:
            return u.scale(self.sell_val[i], c + s * self.bid[i])
        if r == HOLD:
            return self.hold_value(i, c, s)
        d = self.direct_trade(i, c, s)
        if d is None:
            return -math.inf
        return self.hold_value(i, c - trade_cost(d, self.ask[i], self.market.lam), s + d)

    def hold_value(self, i: int, c: float, s: float) -> float:
        """Expected children's value when ``(c, s)`` is held over the next period."""
        total = 0.0
        for ch in self.tree.children[i]:
            v = self.value(ch, c, s)
            if v == -math.inf:
                return -math.inf
            total += self.tree.cond_prob[ch] * v
        return total

    def deriv(self, i: int, c: float, s: float, d0: float, d1: float) -> float:
        """Right directional derivative of U_i at ``(c, s)`` along ``(d0, d1)``."""
        if not self.tree.children[i]:
            ell = liquidation_value(c, s, self.ask[i], self.market.lam)
            if ell <= 0:
                return math.inf
            rate = self.bid[i] if (s > 0 or (s == 0 and d1 > 0)) else self.ask[i]
            return float(self.u.marginal(ell)) * (d0 + d1 * rate)
        r = self.regime_along(i, c, s, d0, d1)
        if r == BUY:
            w = c + s * self.ask[i]
            return self.u.scale_derivative(self.buy_val[i], w) * (d0 + d1 * self.ask[i])
        if r == SELL:
            w = c + s * self.bid[i]
            return self.u.scale_derivative(self.sell_val[i], w) * (d0 + d1 * self.bid[i])
        if r == HOLD:
            return self.hold_deriv(i, c, s, d0, d1)
        # envelope: keep the optimal trade fixed
        d = self.direct_trade(i, c, s)
        return self.hold_deriv(i, c - trade_cost(d, self.ask[i], self.market.lam), s + d, d0, d1)

    def hold_deriv(self, i: int, c: float, s: float, d0: float, d1: float) -> float:
        return math.fsum(self.tree.cond_prob[ch] * self.deriv(ch, c, s, d0, d1)
                         for ch in self.tree.children[i])

    # -- per-node scalar problems ---------------------------------------------
    def _targets(self, i: int) -> None:
        S, B = self.ask[i], self.bid[i]
        pb, pa = self.cones.post_bid[i], self.cones.post_ask[i]
        nid = self.tree.ids[i]
        if pb == pa == S == B:
            # degenerate frictionless node: every child has the same price
            self.m_buy[i], self.m_sell[i] = -math.inf, math.inf
            return

        # buy line: (1 - m*S, m)
        if S <= pb:
            raise ArbitrageError(f"buying at node {nid!r} is riskless profit")
        hi = 1.0 / (S - pb)
        lo_art = pa <= S
        lo = -UNBOUNDED / S if lo_art else -1.0 / (pa - S)

        def buy_d(m):
            return self.hold_deriv(i, 1.0 - m * S, m, -S, 1.0)

        if lo_art and buy_d(lo) <= 0:
            self.m_buy[i] = -math.inf
            self.buy_val[i] = math.nan
        else:
            m, it = _bisect_sup(buy_d, lo, hi)
            self.iterations += it
            self.m_buy[i] = m
            self.buy_val[i] = self.hold_value(i, 1.0 - m * S, m)

        # sell line: (1 - m*B, m)
        if pa <= B:
            raise ArbitrageError(f"short selling at node {nid!r} is riskless profit")
        lo = -1.0 / (pa - B)
        hi_art = B <= pb
        hi = UNBOUNDED / B if hi_art else 1.0 / (B - pb)

        def sell_d(m):
            return self.hold_deriv(i, 1.0 - m * B, m, -B, 1.0)

        if hi_art and sell_d(hi) > 0:
            self.m_sell[i] = math.inf
            self.sell_val[i] = math.nan
        else:
            m, it = _bisect_sup(sell_d, lo, hi)
            self.iterations += it
            self.m_sell[i] = m
            self.sell_val[i] = self.hold_value(i, 1.0 - m * B, m)
        if self.m_sell[i] < self.m_buy[i] - 1e-12 * max(1.0, abs(self.m_buy[i])):
            raise SolverError(f"inconsistent trade targets at node {nid!r}")

    def direct_trade(self, i: int, c: float, s: float) -> float | None:
        """Optimal trade (shares) by a 1-D search over the solvent trade interval."""
        S, lam = self.ask[i], self.market.lam
        iv = feasible_trade_interval(c, s, S, lam, self.cones.post_bid[i], self.cones.post_ask[i])
        if iv is None:
            return None
        scale = max(abs(c) / S, abs(s), 1.0)
        lo = max(iv[0], -UNBOUNDED * scale)
        hi = min(iv[1], UNBOUNDED * scale)
        if hi <= lo:
            return lo

        def g(d):
            rate = S if d >= 0 else self.bid[i]
            return self.hold_deriv(i, c - trade_cost(d, S, lam), s + d, -rate, 1.0)

        d, it = _bisect_sup(g, lo, hi)
        self.iterations += it
        return d

    # -- forward pass -----------------------------------------------------------
    def trade(self, i: int, c: float, s: float) -> float:
        """Optimal trade in shares at node ``i`` from pre-trade ``(c, s)``."""
        if not self.tree.children[i]:
            return -s
        r = self.regime(i, c, s)
        if r == BUY:
            return (c + s * self.ask[i]) * self.m_buy[i] - s
        if r == SELL:
            return (c + s * self.bid[i]) * self.m_sell[i] - s
        if r == HOLD:
            return 0.0
        d = self.direct_trade(i, c, s)
        if d is None:
            raise SolverError(f"insolvent position at node {self.tree.ids[i]!r}")
        return d

    def optimal_strategy(self, x: float) -> Strategy:
        tree = self.tree
        n = tree.size
        d0 = np.zeros(n)
        d1 = np.zeros(n)
        post = np.zeros((n, 2))
        for i in range(n):
            p = tree.parent[i]
            c, s = (x, 0.0) if p < 0 else post[p]
            d = self.trade(i, c, s)
            d1[i] = d
            d0[i] = -trade_cost(d, self.ask[i], self.market.lam)
            post[i] = (c + d0[i], s + d)
        return Strategy(float(x), d0, d1)

    def kkt_residual(self, strategy: Strategy) -> float:
        """Largest positive one-sided derivative of the continuation value at the optimum."""
        pre, post = strategy.positions(self.tree)
        worst = 0.0
        for i in self.tree.internal:
            c, s = post[i]
            dirs = [(-self.ask[i], 1.0), (self.bid[i], -1.0)]
            if strategy.dphi1[i] > 0:
                dirs.append((self.ask[i], -1.0))
            elif strategy.dphi1[i] < 0:
                dirs.append((-self.bid[i], 1.0))
            for d0, d1 in dirs:
                worst = max(worst, self.hold_deriv(i, c, s, d0, d1))
        return worst


@functools.lru_cache(maxsize=32)
def engine_for(market: MarketSpec, utility: Utility) -> Engine:
    return Engine(market, utility)


@dataclass
class Solution:
    value: float
    strategy: Strategy
    market: MarketSpec
    utility: Utility
    x: float
    node_values: np.ndarray
    iterations: int
    kkt_residual: float
    frictionless: bool = False
    duality_gap: float | None = None
    price: np.ndarray | None = field(default=None, repr=False)
    gap_rounding_bound: float = 0.0

    @property
    def terminal_cash(self) -> np.ndarray:
        return self.strategy.terminal_cash(self.market.tree)

    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        return self.strategy.positions(self.market.tree)

    @property
    def first_trade(self) -> float:
        return float(self.strategy.dphi1[0])

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "strategy": self.strategy.to_dict(self.market.tree),
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "duality_gap": self.duality_gap,
            "gap_rounding_bound": self.gap_rounding_bound,
            "frictionless": self.frictionless,
        }


def _check_x(x: float) -> None:
    if not (x > 0 and math.isfinite(x)):
        raise ValueError(f"initial capital must be positive, got {x}")


def solve_frictional(market: MarketSpec, utility: Utility, x: float = 1.0, *,
                     check_cps: bool = True, lam_prime: float | None = None,
                     gap_tol: float = 1e-8, certify: bool = True) -> Solution:
    """Maximize expected utility of liquidated terminal cash under proportional costs."""
    ensure_valid(market.tree)
    _check_x(x)
    if check_cps:
        from .cps import find_cps, default_lambda_prime
        lp = default_lambda_prime(market.lam) if lam_prime is None else lam_prime
        verdict = find_cps(market, lp)
        if not verdict.feasible:
            raise NoCPSError(f"no consistent price system for spread {lp}")
    eng = engine_for(market, utility)
    strat = eng.optimal_strategy(x)
    value = expected_utility(strat, market, utility)
    if not math.isfinite(value):
        raise SolverError("optimal strategy has non-finite expected utility")
    pre, _ = strat.positions(market.tree)
    node_values = np.array([eng.value(i, *pre[i]) for i in range(market.tree.size)])
    sol = Solution(value, strat, market, utility, float(x), node_values,
                   eng.iterations, eng.kkt_residual(strat))
    if certify:
        from .dual_solver import extract_deflator, deflator_dual_value
        defl = extract_deflator(market, utility, sol)
        gap = abs(deflator_dual_value(market, utility, defl) + x * defl.y - value)
        sol.duality_gap = gap
        sol.gap_rounding_bound = gap_rounding_bound(sol)
        if gap > gap_tol * max(1.0, abs(value)) + sol.gap_rounding_bound:
            raise SolverError(f"duality gap {gap:.3e} exceeds tolerance {gap_tol:.1e}")
    return sol


def gap_rounding_bound(sol: Solution) -> float:
    """First-order effect on the duality gap of rounding terminal cash.

    Terminal cash is a sum of O(position) terms, so it carries an absolute
    error of a few ulps of the largest position on its path.  Near-insolvent
    leaves amplify this through U''.
    """
    tree = sol.market.tree
    pre, post = sol.strategy.positions(tree)
    mag = np.abs(post[:, 0]) + np.abs(post[:, 1]) * tree.ask
    eps = np.finfo(float).eps
    total = 0.0
    for k, i in enumerate(tree.leaves):
        g = sol.terminal_cash[k]
        dg = 4 * eps * max(mag[j] for j in tree.path(i))
        curv = abs(float(sol.utility.marginal(g * (1 - 1e-9)) - sol.utility.marginal(g))) / (g * 1e-9)
        total += tree.prob[i] * (curv * dg * sol.x + float(sol.utility.marginal(g)) * dg)
    return total


# -- frictionless ------------------------------------------------------------

def solve_frictionless(tree: EventTree, price, utility: Utility, x: float = 1.0, *,
                       check_arbitrage: bool = True) -> Solution:
    """Maximize E[U(x + shares . price)] in the frictionless market ``price``.

    Wealth recursion: the value at a node is ``scale(k_node, wealth)`` and the
    share position per unit wealth solves a concave scalar problem.
    """
    ensure_valid(tree)
    _check_x(x)
    price = np.asarray(price, dtype=float)
    if price.shape != (tree.size,) or not np.all(price > 0):
        raise ValueError("price must be strictly positive on every node")
    if check_arbitrage:
        from .shadow import frictionless_arbitrage_check
        verdict = frictionless_arbitrage_check(tree, price)
        if not verdict.arbitrage_free:
            raise ArbitrageError(f"frictionless arbitrage at nodes {verdict.nodes}")
    u = utility
    n = tree.size
    unit = float(u.value(1.0))
    k = np.full(n, unit)
    theta = np.full(n, np.nan)  # shares per unit wealth; NaN means "keep holdings"
    iters = 0
    for i in reversed(range(n)):
        kids = tree.children[i]
        if not kids:
            continue
        R = np.array([price[c] - price[i] for c in kids])
        kc = np.array([k[c] for c in kids])
        pc = np.array([tree.cond_prob[c] for c in kids])
        if np.all(R == 0):
            k[i] = math.fsum(pc * kc)
            continue
        if R.min() >= 0 or R.max() <= 0:
            raise ArbitrageError(f"one-step arbitrage at node {tree.ids[i]!r}")
        lo, hi = -1.0 / R.max(), 1.0 / -R.min()

        def g(th, R=R, kc=kc, pc=pc):
            return math.fsum(p * u.scale_derivative(kv, 1.0 + th * r) * r
                             for p, kv, r in zip(pc, kc, R))

        th, it = _bisect_sup(g, lo, hi)
        iters += it
        theta[i] = th
        k[i] = math.fsum(p * u.scale(kv, 1.0 + th * r) for p, kv, r in zip(pc, kc, R))

    wealth = np.zeros(n)
    shares = np.zeros(n)
    for i in range(n):
        p = tree.parent[i]
        wealth[i] = x if p < 0 else wealth[p] + shares[p] * (price[i] - price[p])
        if tree.children[i]:
            shares[i] = (shares[p] if p >= 0 else 0.0) if math.isnan(theta[i]) else theta[i] * wealth[i]
    market0 = MarketSpec(tree.with_prices(price), 0.0)
    strat = Strategy.from_share_path(market0, x, shares)
    value = expected_utility(strat, market0, u)
    node_values = np.array([u.scale(k[i], wealth[i]) if wealth[i] > 0 else -math.inf
                            for i in range(n)])
    resid = 0.0
    for i in tree.internal:
        if not math.isnan(theta[i]):
            resid = max(resid, abs(math.fsum(
                tree.cond_prob[c] * float(u.marginal(wealth[c])) * (price[c] - price[i])
                for c in tree.children[i])))
    return Solution(value, strat, market0, u, float(x), node_values, iters, resid,
                    frictionless=True, price=price)


# -- conditional value and marginal utility ------------------------------------

def conditional_value(market: MarketSpec, utility: Utility, node, psi0: float, psi1: float) -> float:
    """U_t(psi0, psi1) at ``node``; ``-inf`` outside the solvent region."""
    eng = engine_for(market, utility)
    return eng.value(market.tree.resolve(node), float(psi0), float(psi1))


@dataclass(frozen=True)
class MarginalValue:
    deflator: float
    finite_difference: float
    rel_gap: float

    @property
    def value(self) -> float:
        return self.deflator


def marginal_value(market: MarketSpec, utility: Utility, x: float = 1.0,
                   h_rel: float = 1e-4) -> MarginalValue:
    """u'(x) from the extracted deflator, cross-checked by a central difference."""
    from .dual_solver import extract_deflator
    sol = solve_frictional(market, utility, x)
    y = extract_deflator(market, utility, sol).y
    eng = engine_for(market, utility)
    h = h_rel * x
    fd = (eng.value(0, x + h, 0.0) - eng.value(0, x - h, 0.0)) / (2 * h)
    return MarginalValue(y, fd, abs(fd - y) / abs(y))
