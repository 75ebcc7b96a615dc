"""A market where no shadow price exists, with its closed-form solutions.

The ask price starts at 2.  After one period it moves up to 3, or down to
``1 + 1/n`` for ``n = 1, 2, ...`` with probability proportional to
``eps * 2**-n``.  In the second period the up node branches to ``4/(1-lam)`` or
2 and node ``n`` to ``3/(1-lam)`` or ``1 + 1/(n+1)``; the up-move
probabilities are tuned so that a log investor buys ``q0`` (up node) or
``q1/n`` (node ``n``) more shares at time 1.

Infinite-tree quantities are evaluated by summing the series over ``n``;
finite trees keep branches ``n <= N`` and renormalise the time-1 probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dual_solver import Deflator, verify_deflator
from .event_tree import MarketSpec, TreeValidationError, build_tree
from .portfolio import LogUtility, SolvencyCones, Strategy, is_admissible, solvency_cones
from .shadow import ShadowCandidate, frictionless_arbitrage_check, verify_shadow

SERIES_TERMS = 1100  # 2**-1100 underflows, so the tail is below double precision
ROOT_ID, UP_ID = "r", "u"


def _down_id(n: int) -> str:
    return f"d{n}"


@dataclass(frozen=True)
class CounterexampleParams:
    lam: float = 0.2
    epsilon: float = 0.1
    q0: float = 0.1
    q1: float = 0.1
    N: int = 30

    def __post_init__(self):
        lam, eps = self.lam, self.epsilon
        if not 0 < lam < 1:
            raise ValueError(f"lambda must lie in (0, 1), got {lam}")
        if not 0 < eps < 1 / 3:
            raise ValueError(f"epsilon must lie in (0, 1/3), got {eps}")
        q0_max = (1 - lam) / (1 + 3 * lam + 2 * lam ** 2)
        q1_max = (1 - lam) / (1 + 4 * lam + 3 * lam ** 2)
        if not 0 < self.q0 < q0_max:
            raise ValueError(f"q0 must lie in (0, {q0_max:.6g}), got {self.q0}")
        if not 0 < self.q1 < q1_max:
            raise ValueError(f"q1 must lie in (0, {q1_max:.6g}), got {self.q1}")
        if int(self.N) != self.N or self.N < 2:
            raise ValueError(f"truncation N must be an integer >= 2, got {self.N}")

    def with_lambda(self, lam: float) -> "CounterexampleParams":
        return replace(self, lam=lam)

    def with_N(self, N: int) -> "CounterexampleParams":
        return replace(self, N=N)


# -- probabilities and prices ---------------------------------------------------

def p_up_up(params: CounterexampleParams) -> float:
    lam, q0 = params.lam, params.q0
    return (1 + 2 * lam) * (3 + q0 + lam + q0 * lam) / (2 * (1 + lam) * (2 + lam))


def p_down_up(params: CounterexampleParams, n: int) -> float:
    lam, q1 = params.lam, params.q1
    num = (1 + n * (2 + n) * lam) * ((2 * n - 1) * q1 * (1 + lam) + n * n * (2 + lam))
    den = n * n * (1 + n * lam) * (1 + 2 * lam + n * (2 + lam))
    return num / den


def _s1(n: int) -> float:
    return 3.0 if n == 0 else 1.0 + 1.0 / n


def _s2(params: CounterexampleParams, n: int) -> tuple[float, float]:
    """(high, low) ask prices after node ``n`` (``n = 0`` is the up node)."""
    if n == 0:
        return 4.0 / (1 - params.lam), 2.0
    return 3.0 / (1 - params.lam), 1.0 + 1.0 / (n + 1)


def _p2(params: CounterexampleParams, n: int) -> float:
    return p_up_up(params) if n == 0 else p_down_up(params, n)


def renormalisation(params: CounterexampleParams) -> float:
    """Total weight of the retained time-1 branches."""
    return (1 - params.epsilon) + params.epsilon * (1 - 2.0 ** -params.N)


def build_market(params: CounterexampleParams) -> MarketSpec:
    z = renormalisation(params)
    eps = params.epsilon
    rows = [(ROOT_ID, None, 1.0, 2.0)]
    branches = [(UP_ID, 0, (1 - eps) / z)]
    branches += [(_down_id(n), n, eps * 2.0 ** -n / z) for n in range(1, params.N + 1)]
    for nid, n, p in branches:
        rows.append((nid, ROOT_ID, p, _s1(n)))
    for nid, n, _ in branches:
        pu = _p2(params, n)
        if not 0 < pu < 1:
            raise TreeValidationError(f"derived probability {pu} outside (0, 1) at branch {n}")
        hi, lo = _s2(params, n)
        rows.append((nid + "h", nid, pu, hi))
        rows.append((nid + "l", nid, 1 - pu, lo))
    return MarketSpec(build_tree(rows), params.lam)


# -- closed forms ---------------------------------------------------------------

def _wealth1(params: CounterexampleParams, n: int) -> float:
    """Time-1 wealth at the ask after the optimal first trade."""
    lam = params.lam
    return (lam + 2) / (1 + lam) if n == 0 else (lam + 1 / n) / (1 + lam)


def _primal_shares2(params: CounterexampleParams, n: int) -> float:
    return 1 / (1 + params.lam) + (params.q0 if n == 0 else params.q1 / n)


def _primal_terminal(params: CounterexampleParams, n: int) -> tuple[float, float]:
    """Terminal cash in the (high, low) leaves below node ``n``."""
    lam = params.lam
    s1 = _s1(n)
    cash1 = (lam - 1) / (1 + lam)
    sh2 = _primal_shares2(params, n)
    cash2 = cash1 - (sh2 - 1 / (1 + lam)) * s1
    return tuple(cash2 + sh2 * (1 - lam) * s2 for s2 in _s2(params, n))


def _branch_weights(params: CounterexampleParams, terms: int):
    """(n, unnormalised time-1 probability) for the infinite tree."""
    yield 0, 1 - params.epsilon
    for n in range(1, terms + 1):
        yield n, params.epsilon * 2.0 ** -n


def _series(params: CounterexampleParams, term) -> tuple[float, float]:
    """Infinite-tree expectation of a per-branch quantity and a tail bound."""
    vals = []
    last = 0.0
    for n, w in _branch_weights(params, SERIES_TERMS):
        last = w * term(n)
        vals.append(last)
    return math.fsum(vals), abs(last) * 2.0


@dataclass
class ClosedFormPrimal:
    strategy: Strategy
    value: float
    value_truncated: float
    tail_bound: float
    first_trade: float

    def to_dict(self) -> dict:
        return {"value": self.value, "value_truncated": self.value_truncated,
                "tail_bound": self.tail_bound, "first_trade": self.first_trade}


def closed_form_primal(params: CounterexampleParams,
                       market: MarketSpec | None = None) -> ClosedFormPrimal:
    market = market or build_market(params)
    tree = market.tree
    shares = np.zeros(tree.size)
    shares[tree.index[ROOT_ID]] = 1 / (1 + params.lam)
    shares[tree.index[UP_ID]] = _primal_shares2(params, 0)
    for n in range(1, params.N + 1):
        shares[tree.index[_down_id(n)]] = _primal_shares2(params, n)
    strat = Strategy.from_share_path(market, 1.0, shares)

    def term(n):
        hi, lo = _primal_terminal(params, n)
        p = _p2(params, n)
        return p * math.log(hi) + (1 - p) * math.log(lo)

    value, tail = _series(params, term)
    trunc = math.fsum(tree.prob[i] * math.log(g)
                      for i, g in zip(tree.leaves, strat.terminal_cash(tree)))
    return ClosedFormPrimal(strat, value, trunc, tail, 1 / (1 + params.lam))


def closed_form_dual(params: CounterexampleParams, market: MarketSpec | None = None) -> Deflator:
    """Marginal utilities along the optimum, valued at ask (t=0,1) and bid (t=2)."""
    market = market or build_market(params)
    tree = market.tree
    lam = params.lam
    y0 = np.zeros(tree.size)
    y1 = np.zeros(tree.size)
    y0[0], y1[0] = 1.0, 2.0
    for i in tree.nodes_at(1):
        nid = tree.ids[i]
        n = 0 if nid == UP_ID else int(nid[1:])
        w = _wealth1(params, n)
        y0[i], y1[i] = 1 / w, _s1(n) / w
        hi, lo = _primal_terminal(params, n)
        for c, g in zip(tree.children[i], (hi, lo)):
            y0[c] = 1 / g
            y1[c] = (1 - lam) * tree.ask[c] / g
    return Deflator(y0, y1)


def infinite_cones(params: CounterexampleParams, market: MarketSpec) -> SolvencyCones:
    """Solvency cones of the untruncated market, restricted to the retained nodes.

    Only the root changes: the worst time-1 bid over all branches is the limit
    ``(1-lam) * 1``, which no finite truncation attains.
    """
    c = solvency_cones(market)
    post_bid = c.post_bid.copy()
    post_bid[0] = (1 - params.lam) * 1.0
    return SolvencyCones(c.pre_bid, c.pre_ask, post_bid, c.post_ask)


def fixed_candidate(params: CounterexampleParams, market: MarketSpec | None = None) -> ShadowCandidate:
    """Ask price at t = 0, 1 and bid price at t = 2."""
    market = market or build_market(params)
    tree = market.tree
    price = np.where(tree.time == 2, market.bid, market.ask)
    return ShadowCandidate(price, "closed-form dual ratio")


def _frictionless_shares2(params: CounterexampleParams, n: int) -> float:
    lam = params.lam
    if n == 0:
        return 2 * (1 + lam) / (2 + lam) * (1 / (1 + lam) + params.q0)
    return (1 / n) * (1 + lam) / (lam + 1 / n) * (1 / (1 + lam) + params.q1 / n)


@dataclass
class ClosedFormFrictionless:
    strategy: Strategy
    value: float
    tail_bound: float
    first_trade: float
    second_trades: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"value": self.value, "tail_bound": self.tail_bound,
                "first_trade": self.first_trade, "second_trades": self.second_trades}


def _frictionless_terminal(params: CounterexampleParams, n: int) -> tuple[float, float]:
    w1 = 1.0 + (_s1(n) - 2.0)
    sh = _frictionless_shares2(params, n)
    return tuple(w1 + sh * ((1 - params.lam) * s2 - _s1(n)) for s2 in _s2(params, n))


def closed_form_frictionless(params: CounterexampleParams,
                             market: MarketSpec | None = None) -> ClosedFormFrictionless:
    """Frictionless log optimum on the candidate price, one share bought at t = 0."""
    market = market or build_market(params)
    tree = market.tree
    cand = fixed_candidate(params, market).price
    shares = np.zeros(tree.size)
    shares[0] = 1.0
    trades = {}
    for i in tree.nodes_at(1):
        nid = tree.ids[i]
        n = 0 if nid == UP_ID else int(nid[1:])
        shares[i] = _frictionless_shares2(params, n)
        trades[nid] = shares[i] - 1.0
    m0 = MarketSpec(tree.with_prices(cand), 0.0)
    strat = Strategy.from_share_path(m0, 1.0, shares)

    def term(n):
        hi, lo = _frictionless_terminal(params, n)
        p = _p2(params, n)
        return p * math.log(hi) + (1 - p) * math.log(lo)

    value, tail = _series(params, term)
    return ClosedFormFrictionless(strat, value, tail, 1.0, trades)


# -- first-order conditions --------------------------------------------------------

def second_period_residuals(params: CounterexampleParams) -> np.ndarray:
    """Derivative of the time-1 objective at the closed-form trades, per branch n = 0..N."""
    lam = params.lam
    out = []
    for n in range(params.N + 1):
        w = _wealth1(params, n)
        sh = _primal_shares2(params, n)
        p = _p2(params, n)
        r = [(1 - lam) * s2 - _s1(n) for s2 in _s2(params, n)]
        out.append(p * r[0] / (w + sh * r[0]) + (1 - p) * r[1] / (w + sh * r[1]))
    return np.array(out)


def root_derivative(params: CounterexampleParams, trade: float | None = None) -> float:
    """Slope of the time-0 objective in the first purchase (infinite tree)."""
    m = 1 / (1 + params.lam) if trade is None else trade
    value, _ = _series(params, lambda n: (_s1(n) - 2.0) / (1 + m * (_s1(n) - 2.0)))
    return value


def root_derivative_bound(params: CounterexampleParams) -> float:
    return (1 + params.lam) * (0.5 - 1.5 * params.epsilon)


def truncated_cap(params: CounterexampleParams) -> float:
    lam = params.lam
    return 1 / (1 + lam - (1 - lam) / params.N)


# -- certificate -----------------------------------------------------------------------

@dataclass
class NonexistenceCertificate:
    ok: bool
    reasons: list
    params: dict
    gap: float
    frictional_value: float
    frictionless_value: float
    holdings: dict
    supermartingale_margins: dict
    truncation: list
    robustness: list
    first_order: dict
    renormalisation: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _supermartingale_margins(params: CounterexampleParams) -> tuple[float, float]:
    """E[Y_1] - Y_0 for both components on the infinite tree."""
    d0, _ = _series(params, lambda n: 1 / _wealth1(params, n))
    d1, _ = _series(params, lambda n: _s1(n) / _wealth1(params, n))
    return d0 - 1.0, d1 - 2.0


def _infinite_gap(params: CounterexampleParams) -> tuple[float, float, float]:
    fr = closed_form_primal(params).value
    fl = closed_form_frictionless(params).value
    return fl - fr, fr, fl


def verify_nonexistence(params: CounterexampleParams = CounterexampleParams(), *,
                        truncations=(5, 10, 20, 30), gap_tol: float = 1e-4,
                        seed: int = 0) -> NonexistenceCertificate:
    from .primal_solver import solve_frictional

    reasons = []
    gap, fr, fl = _infinite_gap(params)
    if not gap > gap_tol:
        reasons.append(f"utility gap {gap:.3e} not above {gap_tol:.1e}")
    holdings = {"frictional_first_trade": 1 / (1 + params.lam), "frictionless_first_trade": 1.0}

    d0, d1 = _supermartingale_margins(params)
    market = build_market(params)
    defl = closed_form_dual(params, market)
    drep = verify_deflator(market, defl, seed=seed, cones=infinite_cones(params, market))
    trep = verify_deflator(market, defl, seed=seed, k=0)
    margins = {"infinite": [d0, d1], "truncated": list(drep.root_drift),
               "certificate_ok": drep.ok, "truncated_market_certificate_ok": trep.ok}
    if not (d0 < -1e-6 and d1 < -1e-6):
        reasons.append("closed-form dual is not a strict supermartingale")
    if not drep.ok:
        reasons.append(f"closed-form dual fails certificate: {drep.violations[:3]}")
    cf = closed_form_primal(params, market)
    if not is_admissible(cf.strategy, market, 1.0):
        reasons.append("closed-form primal strategy is not admissible on the truncated tree")

    trunc = []
    u = LogUtility()
    for N in truncations:
        pN = params.with_N(N)
        sol = solve_frictional(build_market(pN), u, 1.0)
        trunc.append({"N": N, "first_trade": sol.first_trade, "cap": truncated_cap(pN),
                      "residual": abs(sol.first_trade - 1 / (1 + params.lam)),
                      "value": sol.value})
    res = [t["residual"] for t in trunc]
    if not all(b < a for a, b in zip(res, res[1:])):
        reasons.append(f"truncated first trades do not converge monotonically: {res}")
    if trunc and abs(trunc[-1]["first_trade"] - trunc[-1]["cap"]) > 1e-6:
        reasons.append("largest truncation does not trade to its solvency cap")

    robust = []
    for lam2 in (params.lam / 2, params.lam / 4):
        g2, _, _ = _infinite_gap(params.with_lambda(lam2))
        robust.append({"lambda": lam2, "gap": g2})
        if not g2 > 0:
            reasons.append(f"gap not positive at spread {lam2}")

    foc = second_period_residuals(params)
    hp = root_derivative(params)
    first_order = {"max_second_period_residual": float(np.max(np.abs(foc))),
                   "root_derivative": hp, "root_derivative_bound": root_derivative_bound(params)}
    if first_order["max_second_period_residual"] > 1e-9:
        reasons.append("second-period first-order conditions fail")
    if hp < root_derivative_bound(params) - 1e-9:
        reasons.append("root derivative below its lower bound")
    if not frictionless_arbitrage_check(market.tree, fixed_candidate(params, market).price).arbitrage_free:
        reasons.append("candidate price admits arbitrage")

    return NonexistenceCertificate(
        not reasons, reasons,
        {"lambda": params.lam, "epsilon": params.epsilon, "q0": params.q0, "q1": params.q1,
         "N": params.N},
        gap, fr, fl, holdings, margins, trunc, robust, first_order, renormalisation(params))


def truncated_shadow_gap(params: CounterexampleParams) -> float:
    """Frictionless value on the fixed candidate minus the frictional optimum, truncated tree."""
    market = build_market(params)
    verdict = verify_shadow(market, LogUtility(), 1.0, fixed_candidate(params, market))
    return verdict.margin
