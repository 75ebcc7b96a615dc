"""Strategies, solvency, and utility functions.

A strategy is stored as the trade made at every node.  The trade at a leaf is
the terminal liquidation, so the holdings *after* trading at a leaf are
``(terminal cash, 0)``.  "Pre-trade" holdings at a node are the post-trade
holdings of its parent (``(x, 0)`` at the root).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .event_tree import EventTree, MarketSpec

SF_TOL = 1e-10


class DomainError(ValueError):
    pass


# -- utilities ----------------------------------------------------------------

class Utility:
    """Log or power utility together with its conjugate.

    ``scale`` expresses homotheticity: the value of ``k`` times a position is
    ``scale(value_of_position, k)``.
    """

    name: str
    closed_domain: bool = False

    def __call__(self, x):
        return self.value(x)

    def _check_x(self, x):
        if not np.all(np.asarray(x) > 0):
            raise DomainError(f"utility evaluated at non-positive wealth {x}")

    def _check_y(self, y):
        if not np.all(np.asarray(y) > 0):
            raise DomainError(f"conjugate evaluated at non-positive argument {y}")

    def value_or_sentinel(self, x: float) -> float:
        """U(x) for admissible x, ``-inf`` outside the effective domain."""
        if x > 0:
            return float(self.value(x))
        if x == 0 and self.closed_domain:
            return 0.0
        return -math.inf

    @property
    def asymptotic_elasticity(self) -> float:
        raise NotImplementedError


@dataclass(frozen=True)
class LogUtility(Utility):
    name: str = field(default="log", init=False)

    def value(self, x):
        self._check_x(x)
        return np.log(x)

    def marginal(self, x):
        self._check_x(x)
        return 1.0 / np.asarray(x, dtype=float)

    def inverse_marginal(self, y):
        self._check_y(y)
        return 1.0 / np.asarray(y, dtype=float)

    def conjugate(self, y):
        self._check_y(y)
        return -np.log(y) - 1.0

    def conjugate_derivative(self, y):
        self._check_y(y)
        return -1.0 / np.asarray(y, dtype=float)

    def scale(self, value: float, k: float) -> float:
        return value + math.log(k)

    def scale_derivative(self, value: float, k: float) -> float:
        return 1.0 / k

    @property
    def asymptotic_elasticity(self) -> float:
        return 0.0

    def spec(self) -> str:
        return "log"


@dataclass(frozen=True)
class PowerUtility(Utility):
    """U(x) = x**p / p with p < 1, p != 0."""

    p: float
    name: str = field(default="power", init=False)

    def __post_init__(self):
        if not (self.p < 1 and self.p != 0):
            raise DomainError(f"power utility needs p < 1, p != 0; got {self.p}")

    @property
    def closed_domain(self) -> bool:  # U(0) = 0 is finite for 0 < p < 1
        return self.p > 0

    def value(self, x):
        self._check_x(x)
        return np.power(x, self.p) / self.p

    def marginal(self, x):
        self._check_x(x)
        return np.power(x, self.p - 1.0)

    def inverse_marginal(self, y):
        self._check_y(y)
        return np.power(y, 1.0 / (self.p - 1.0))

    def conjugate(self, y):
        self._check_y(y)
        q = self.p / (self.p - 1.0)
        return (1.0 / self.p - 1.0) * np.power(y, q)

    def conjugate_derivative(self, y):
        return -self.inverse_marginal(y)

    def scale(self, value: float, k: float) -> float:
        return k ** self.p * value

    def scale_derivative(self, value: float, k: float) -> float:
        return self.p * k ** (self.p - 1.0) * value

    @property
    def asymptotic_elasticity(self) -> float:
        return max(self.p, 0.0)

    def spec(self) -> str:
        return f"power:{self.p!r}"


def parse_utility(text: str) -> Utility:
    """Parse ``log``, ``power:0.5`` or ``power(0.5)``."""
    text = text.strip().lower()
    if text == "log":
        return LogUtility()
    for sep in (":", "("):
        if text.startswith("power" + sep):
            return PowerUtility(float(text[len("power") + 1:].rstrip(")")))
    raise ValueError(f"unknown utility {text!r}; use 'log' or 'power:<p>'")


def utility_value(u: Utility, x) -> float:
    return float(u.value(x))


def marginal(u: Utility, x) -> float:
    return float(u.marginal(x))


def inverse_marginal(u: Utility, y) -> float:
    return float(u.inverse_marginal(y))


def conjugate(u: Utility, y) -> float:
    return float(u.conjugate(y))


# -- liquidation and solvency -------------------------------------------------

def liquidation_value(x: float, y: float, ask: float, lam: float) -> float:
    """Cash from closing ``(x cash, y shares)`` at bid ``(1-lam)*ask`` / ask."""
    if y >= 0:
        return x + y * (1.0 - lam) * ask
    return x + y * ask


def trade_cost(dphi1: float, ask: float, lam: float) -> float:
    """Cash consumed by an equality-self-financing trade of ``dphi1`` shares."""
    if dphi1 >= 0:
        return dphi1 * ask
    return dphi1 * (1.0 - lam) * ask


@dataclass(frozen=True)
class SolvencyCones:
    """Effective bid/ask bounds describing solvent positions.

    A position ``(c, s)`` at a node is solvent before trading iff
    ``c + s*pre_bid >= 0`` when ``s >= 0`` and ``c + s*pre_ask >= 0`` when
    ``s < 0``.  ``post_bid``/``post_ask`` play the same role for positions
    held over the next period (intersection over children); they are NaN at
    leaves.
    """

    pre_bid: np.ndarray
    pre_ask: np.ndarray
    post_bid: np.ndarray
    post_ask: np.ndarray

    def gauge_pre(self, i: int, c: float, s: float) -> float:
        return c + s * (self.pre_bid[i] if s >= 0 else self.pre_ask[i])

    def gauge_post(self, i: int, c: float, s: float) -> float:
        return c + s * (self.post_bid[i] if s >= 0 else self.post_ask[i])

    def regular(self, market: MarketSpec) -> np.ndarray:
        """Nodes where holding over the period is no safer than liquidating now."""
        bid, ask = market.bid, market.ask
        out = np.ones(market.tree.size, dtype=bool)
        for i in market.tree.internal:
            out[i] = self.post_bid[i] <= bid[i] + 1e-14 and self.post_ask[i] >= ask[i] - 1e-14
        return out


def solvency_cones(market: MarketSpec) -> SolvencyCones:
    tree = market.tree
    n = tree.size
    pre_bid = np.empty(n)
    pre_ask = np.empty(n)
    post_bid = np.full(n, np.nan)
    post_ask = np.full(n, np.nan)
    bid, ask = market.bid, market.ask
    for i in reversed(range(n)):
        kids = tree.children[i]
        if not kids:
            pre_bid[i], pre_ask[i] = bid[i], ask[i]
            continue
        post_bid[i] = min(pre_bid[c] for c in kids)
        post_ask[i] = max(pre_ask[c] for c in kids)
        pre_bid[i] = max(bid[i], post_bid[i])
        pre_ask[i] = min(ask[i], post_ask[i])
    return SolvencyCones(pre_bid, pre_ask, post_bid, post_ask)


def feasible_trade_interval(c: float, s: float, ask: float, lam: float,
                            post_bid: float, post_ask: float) -> tuple[float, float] | None:
    """Trades ``d`` (shares) keeping the post-trade position solvent.

    The gauge of the post-trade position is concave and piecewise linear in
    ``d`` with kinks at ``0`` and ``-s``; its superlevel set at 0 is returned
    (possibly with infinite ends), or ``None`` if empty.
    """
    bid = (1.0 - lam) * ask

    def gauge(d):
        cash = c - (d * ask if d >= 0 else d * bid)
        sh = s + d
        return cash + sh * (post_bid if sh >= 0 else post_ask)

    kinks = sorted({0.0, -s})
    vals = [gauge(k) for k in kinks]
    j = int(np.argmax(vals))
    if vals[j] < 0:
        return None
    # slope to the right of the last kink and left of the first
    right_slope = -ask + post_bid
    left_slope = -bid + post_ask  # d/dd of gauge for d -> -inf
    # walk right
    hi = math.inf
    pts = kinks[j:]
    for a, b in zip(pts, pts[1:]):
        if gauge(b) < 0:
            ga = gauge(a)
            hi = a + ga / (ga - gauge(b)) * (b - a)
            break
    else:
        last = pts[-1]
        if right_slope < 0:
            hi = last - gauge(last) / right_slope
    lo = -math.inf
    pts = kinks[:j + 1][::-1]
    for a, b in zip(pts, pts[1:]):
        if gauge(b) < 0:
            ga = gauge(a)
            lo = a - ga / (ga - gauge(b)) * (a - b)
            break
    else:
        first = pts[-1]
        if left_slope > 0:
            lo = first - gauge(first) / left_slope
    return lo, hi


# -- strategies ---------------------------------------------------------------

@dataclass(frozen=True)
class Strategy:
    """Trades ``(dphi0, dphi1)`` at every node of a tree, from ``(initial_cash, 0)``.

    Leaf trades liquidate the risky position.
    """

    initial_cash: float
    dphi0: np.ndarray
    dphi1: np.ndarray

    def positions(self, tree: EventTree) -> tuple[np.ndarray, np.ndarray]:
        """Pre-trade and post-trade holdings, each of shape ``(n, 2)``."""
        n = tree.size
        if self.dphi0.shape != (n,) or self.dphi1.shape != (n,):
            raise ValueError("strategy/tree shape mismatch")
        pre = np.empty((n, 2))
        post = np.empty((n, 2))
        for i in range(n):
            p = tree.parent[i]
            pre[i] = (self.initial_cash, 0.0) if p < 0 else post[p]
            post[i] = pre[i] + (self.dphi0[i], self.dphi1[i])
        return pre, post

    def terminal_cash(self, tree: EventTree) -> np.ndarray:
        _, post = self.positions(tree)
        return np.array([post[i, 0] for i in tree.leaves])

    def shares(self, tree: EventTree) -> np.ndarray:
        """Post-trade share holdings per node."""
        return self.positions(tree)[1][:, 1]

    def to_dict(self, tree: EventTree) -> dict:
        return {
            "initial_cash": self.initial_cash,
            "trades": [{"node": nid, "dphi0": float(self.dphi0[i]), "dphi1": float(self.dphi1[i])}
                       for i, nid in enumerate(tree.ids)],
        }

    @classmethod
    def from_dict(cls, data: Mapping, tree: EventTree) -> "Strategy":
        extra = set(data) - {"initial_cash", "trades"}
        if extra:
            raise ValueError(f"unknown strategy fields: {sorted(extra)}")
        d0 = np.zeros(tree.size)
        d1 = np.zeros(tree.size)
        seen = set()
        for entry in data["trades"]:
            if set(entry) - {"node", "dphi0", "dphi1"}:
                raise ValueError(f"unknown trade fields: {sorted(set(entry) - {'node', 'dphi0', 'dphi1'})}")
            i = tree.resolve(entry["node"])
            seen.add(i)
            d0[i] = float(entry["dphi0"])
            d1[i] = float(entry["dphi1"])
        if len(seen) != tree.size:
            raise ValueError("strategy must list a trade for every node")
        return cls(float(data["initial_cash"]), d0, d1)

    @classmethod
    def from_share_path(cls, market: MarketSpec, x: float, shares: np.ndarray) -> "Strategy":
        """Equality-self-financing strategy with given post-trade shares at internal nodes."""
        tree = market.tree
        d0 = np.zeros(tree.size)
        d1 = np.zeros(tree.size)
        held = np.zeros(tree.size)
        for i in range(tree.size):
            p = tree.parent[i]
            before = 0.0 if p < 0 else held[p]
            after = 0.0 if tree.is_leaf(i) else float(shares[i])
            d1[i] = after - before
            d0[i] = -trade_cost(d1[i], tree.ask[i], market.lam)
            held[i] = after
        return cls(float(x), d0, d1)


@dataclass(frozen=True)
class SelfFinancingReport:
    ok: bool
    slack: np.ndarray  # allowed cash change minus actual; >= 0 when financed

    @property
    def min_slack(self) -> float:
        return float(self.slack.min())


def is_self_financing(strategy: Strategy, market: MarketSpec, tol: float = SF_TOL) -> SelfFinancingReport:
    tree = market.tree
    if strategy.dphi0.shape != (tree.size,):
        raise ValueError("strategy/tree shape mismatch")
    slack = np.array([-trade_cost(strategy.dphi1[i], tree.ask[i], market.lam) - strategy.dphi0[i]
                      for i in range(tree.size)])
    return SelfFinancingReport(bool(np.all(slack >= -tol)), slack)


def is_admissible(strategy: Strategy, market: MarketSpec, x: float, tol: float = SF_TOL) -> bool:
    if abs(strategy.initial_cash - x) > tol:
        return False
    if not is_self_financing(strategy, market, tol).ok:
        return False
    _, post = strategy.positions(market.tree)
    for i in market.tree.leaves:
        if abs(post[i, 1]) > tol or post[i, 0] < -tol:
            return False
    return True


def expected_utility(strategy: Strategy, market: MarketSpec, u: Utility) -> float:
    tree = market.tree
    g = strategy.terminal_cash(tree)
    vals = [u.value_or_sentinel(v) for v in g]
    if any(v == -math.inf for v in vals):
        return -math.inf
    return math.fsum(tree.prob[i] * v for i, v in zip(tree.leaves, vals))


def frictionless_wealth(strategy: Strategy, price, x: float, tree: EventTree) -> np.ndarray:
    """x + (shares . price)_t at every node, using the strategy's share holdings."""
    price = np.asarray(price, dtype=float)
    if price.shape != (tree.size,):
        raise ValueError("price/tree shape mismatch")
    shares = strategy.shares(tree)
    w = np.empty(tree.size)
    for i in range(tree.size):
        p = tree.parent[i]
        w[i] = x if p < 0 else w[p] + shares[p] * (price[i] - price[p])
    return w


def sample_admissible_strategy(market: MarketSpec, x: float, rng: np.random.Generator,
                               cones: SolvencyCones | None = None,
                               p_hold: float = 0.25) -> Strategy:
    """Random admissible strategy: random solvent trade at each internal node."""
    tree = market.tree
    cones = cones or solvency_cones(market)
    shares = np.zeros(tree.size)
    cash = np.zeros(tree.size)
    for i in range(tree.size):
        p = tree.parent[i]
        c, s = (x, 0.0) if p < 0 else (cash[p], shares[p])
        if tree.is_leaf(i):
            continue
        iv = feasible_trade_interval(c, s, tree.ask[i], market.lam,
                                     cones.post_bid[i], cones.post_ask[i])
        if iv is None:
            raise ValueError(f"insolvent position reached at node {tree.ids[i]!r}")
        lo, hi = iv
        width = 4.0 * max(abs(c) / tree.ask[i], abs(s), 1e-9)
        lo, hi = max(lo, -width), min(hi, width)
        if hi < lo:
            lo, hi = iv
        # stay off the solvency boundary
        lo, hi = lo + 0.02 * (hi - lo), hi - 0.02 * (hi - lo)
        if lo <= 0.0 <= hi and rng.random() < p_hold:
            d = 0.0
        else:
            d = float(rng.uniform(lo, hi))
        shares[i] = s + d
        cash[i] = c - trade_cost(d, tree.ask[i], market.lam)
    return Strategy.from_share_path(market, x, shares)
