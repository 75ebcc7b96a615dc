"""Shadow-price candidates and the existence verdict.

A candidate is a frictionless price process inside the bid-ask spread.  It is
a shadow price when the frictionless optimum on it attains the frictional
value and only trades where the candidate sits at the ask (purchases) or at
the bid (sales).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cps import MartingaleReport, is_martingale
from .dual_solver import Deflator, DualSolution
from .event_tree import EventTree, MarketSpec
from .portfolio import Utility
from .primal_solver import Solution, solve_frictional, solve_frictionless

SPREAD_TOL = 1e-9


@dataclass(frozen=True)
class ArbitrageVerdict:
    arbitrage_free: bool
    nodes: list

    def to_dict(self) -> dict:
        return {"arbitrage_free": self.arbitrage_free, "nodes": self.nodes}


def frictionless_arbitrage_check(tree: EventTree, price, tol: float = 1e-12) -> ArbitrageVerdict:
    """One-period price changes must take both signs or vanish at every node."""
    price = np.asarray(price, dtype=float)
    if price.shape != (tree.size,):
        raise ValueError("price/tree shape mismatch")
    bad = []
    for i in tree.internal:
        r = np.array([price[c] - price[i] for c in tree.children[i]])
        scale = tol * max(1.0, abs(price[i]))
        if np.all(np.abs(r) <= scale):
            continue
        if r.max() <= scale or r.min() >= -scale:
            bad.append(tree.ids[i])
    return ArbitrageVerdict(not bad, bad)


@dataclass(frozen=True)
class ShadowCandidate:
    price: np.ndarray
    source: str

    def to_dict(self, tree: EventTree) -> dict:
        return {"source": self.source,
                "price": {nid: float(self.price[i]) for i, nid in enumerate(tree.ids)}}


def candidate_from_dual(market: MarketSpec, dual, source: str = "dual minimizer") -> ShadowCandidate:
    """Y1/Y0 nodewise, clipped into the spread after a containment check."""
    defl: Deflator = dual.deflator if isinstance(dual, DualSolution) else dual
    if np.any(defl.y0 <= 0):
        i = int(np.flatnonzero(defl.y0 <= 0)[0])
        raise ValueError(f"Y0 vanishes at node {market.tree.ids[i]!r}; no candidate")
    r = defl.y1 / defl.y0
    S, B = market.ask, market.bid
    out = np.flatnonzero((r < B - SPREAD_TOL * S) | (r > S + SPREAD_TOL * S))
    if out.size:
        raise ValueError(f"candidate leaves the spread at node {market.tree.ids[out[0]]!r}")
    return ShadowCandidate(np.clip(r, B, S), source)


@dataclass
class ShadowVerdict:
    exists: bool
    candidate: ShadowCandidate
    frictional_value: float
    frictionless_value: float
    margin: float
    alignment: dict
    martingale: MartingaleReport | None
    arbitrage: ArbitrageVerdict
    frictionless: Solution | None = field(default=None, repr=False)

    def to_dict(self, tree: EventTree) -> dict:
        return {
            "exists": self.exists,
            "candidate": self.candidate.to_dict(tree),
            "frictional_value": self.frictional_value,
            "frictionless_value": self.frictionless_value,
            "margin": self.margin,
            "alignment": self.alignment,
            "martingale": None if self.martingale is None else self.martingale.to_dict(),
            "arbitrage": self.arbitrage.to_dict(),
        }


def verify_shadow(market: MarketSpec, utility: Utility, x: float, candidate: ShadowCandidate, *,
                  primal: Solution | None = None, deflator: Deflator | None = None,
                  frictional_value: float | None = None, value_tol: float = 1e-7,
                  trade_tol: float = 1e-9, price_tol: float = 1e-8) -> ShadowVerdict:
    """Solve the frictionless problem on the candidate and compare with the frictional optimum.

    ``frictional_value`` overrides the solve (used for values known in closed form).
    """
    tree = market.tree
    S, B = market.ask, market.bid
    price = np.asarray(candidate.price, float)
    mart = None if deflator is None else is_martingale(tree, deflator.y0)
    arb = frictionless_arbitrage_check(tree, price)
    if frictional_value is None:
        primal = primal or solve_frictional(market, utility, x)
        frictional_value = primal.value
    if not arb.arbitrage_free:
        return ShadowVerdict(False, candidate, frictional_value, math.inf, math.inf,
                             {"ok": False, "reason": "candidate market has arbitrage"}, mart, arb)
    fl = solve_frictionless(tree, price, utility, x, check_arbitrage=False)
    d1 = fl.strategy.dphi1
    buy = sell = 0.0
    for i in tree.internal:
        if d1[i] > trade_tol:
            buy = max(buy, abs(price[i] - S[i]) / S[i])
        elif d1[i] < -trade_tol:
            sell = max(sell, abs(price[i] - B[i]) / S[i])
    aligned = buy <= price_tol and sell <= price_tol
    gap = fl.value - frictional_value
    exists = abs(gap) <= value_tol and aligned
    align = {"ok": bool(aligned), "buy_residual": buy, "sell_residual": sell}
    return ShadowVerdict(bool(exists), candidate, float(frictional_value), float(fl.value),
                         float(gap), align, mart, arb, fl)


def frictionless_dual(solution: Solution) -> Deflator:
    """(Y, Y*price) with Y the martingale of marginal utilities of frictionless terminal wealth."""
    tree = solution.market.tree
    price = solution.price
    y0 = np.zeros(tree.size)
    g = solution.terminal_cash
    for k, i in enumerate(tree.leaves):
        y0[i] = float(solution.utility.marginal(g[k]))
    for i in reversed(tree.internal):
        y0[i] = math.fsum(tree.cond_prob[c] * y0[c] for c in tree.children[i])
    return Deflator(y0, y0 * price)
