"""Supermartingale deflators: extraction, certification and the dual program.

A deflator is a pair ``(Y0, Y1)`` per node.  The certificate used here is
node-wise: ``Y1/Y0`` lies in the bid-ask spread, and the one-step decrement
``delta = Y_t - E[Y_{t+1} | node]`` lies in the dual of the cone of positions
that can be held over the next period without risking insolvency::

    delta0 >= 0,   post_bid * delta0 <= delta1 <= post_ask * delta0.

Together these make ``Y0*phi0 + Y1*phi1`` a supermartingale for every
admissible strategy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .event_tree import MarketSpec
from .portfolio import (
    SolvencyCones,
    frictionless_wealth,
    Utility,
    sample_admissible_strategy,
    solvency_cones,
)
from .primal_solver import Solution, SolverError, engine_for

CERT_TOL = 1e-9
EXTRACT_TOL = 1e-6


class ExtractionError(SolverError):
    """The superdifferential along the optimum could not be resolved to tolerance."""


@dataclass(frozen=True)
class Deflator:
    y0: np.ndarray
    y1: np.ndarray

    @property
    def y(self) -> float:
        return float(self.y0[0])

    @property
    def ratio(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.y1 / self.y0

    def scaled(self, k: float) -> "Deflator":
        return Deflator(self.y0 * k, self.y1 * k)

    def to_dict(self, tree) -> dict:
        return {"nodes": [{"node": nid, "y0": float(self.y0[i]), "y1": float(self.y1[i])}
                          for i, nid in enumerate(tree.ids)]}

    @classmethod
    def from_dict(cls, data: Mapping, tree) -> "Deflator":
        if set(data) - {"nodes"}:
            raise ValueError(f"unknown deflator fields: {sorted(set(data) - {'nodes'})}")
        y0 = np.full(tree.size, np.nan)
        y1 = np.full(tree.size, np.nan)
        for e in data["nodes"]:
            if set(e) - {"node", "y0", "y1"}:
                raise ValueError("unknown deflator entry fields")
            i = tree.resolve(e["node"])
            y0[i], y1[i] = float(e["y0"]), float(e["y1"])
        if np.isnan(y0).any():
            raise ValueError("deflator must list every node")
        return cls(y0, y1)


@dataclass
class DualSolution:
    deflator: Deflator
    value: float
    y: float
    yhat: float | None = None
    status: str = "optimal"


def deflator_dual_value(market: MarketSpec, utility: Utility, deflator: Deflator) -> float:
    """E[V(Y0_T)]."""
    tree = market.tree
    return math.fsum(tree.prob[i] * float(utility.conjugate(deflator.y0[i])) for i in tree.leaves)


# -- extraction ----------------------------------------------------------------

def extract_deflator(market: MarketSpec, utility: Utility, primal: Solution,
                     tol: float = EXTRACT_TOL) -> Deflator:
    """Superdifferential of the conditional value functions along the optimum.

    ``Y0`` is unique.  ``Y1`` is resolved to an interval bottom-up (a point at
    nodes that trade, the spread-intersected sum of the children's intervals at
    nodes that do not) and then selected top-down so that ``Y1`` has no drift;
    at the root the upper end is taken.
    """
    tree = market.tree
    n = tree.size
    S, B = market.ask, market.bid
    pre, post = primal.strategy.positions(tree)
    d1 = primal.strategy.dphi1
    y0 = np.zeros(n)
    lo = np.zeros(n)
    hi = np.zeros(n)
    for i in reversed(range(n)):
        kids = tree.children[i]
        if not kids:
            g = post[i, 0]
            if g <= 0:
                raise ExtractionError(f"terminal cash {g} at node {tree.ids[i]!r} has no marginal utility")
            y0[i] = float(utility.marginal(g))
            s = pre[i, 1]
            lo[i] = y0[i] * (B[i] if s >= 0 else S[i])
            hi[i] = y0[i] * (S[i] if s <= 0 else B[i])
            continue
        p = np.array([tree.cond_prob[c] for c in kids])
        y0[i] = float(p @ y0[list(kids)])
        a = float(p @ lo[list(kids)])
        b = float(p @ hi[list(kids)])
        slack = tol * max(abs(a), abs(b), y0[i] * S[i])
        if d1[i] > 0:
            v = y0[i] * S[i]
        elif d1[i] < 0:
            v = y0[i] * B[i]
        else:
            v = None
        if v is not None:
            if not a - slack <= v <= b + slack:
                raise ExtractionError(
                    f"superdifferential not computable at node {tree.ids[i]!r}: "
                    f"trade price {v:.12g} outside [{a:.12g}, {b:.12g}]")
            lo[i] = hi[i] = v
        else:
            lo[i] = max(a, y0[i] * B[i])
            hi[i] = min(b, y0[i] * S[i])
            if lo[i] > hi[i] + slack:
                raise ExtractionError(
                    f"superdifferential not computable at node {tree.ids[i]!r}: empty interval")
            if lo[i] > hi[i]:
                lo[i] = hi[i] = 0.5 * (lo[i] + hi[i])

    y1 = np.zeros(n)
    y1[0] = hi[0]
    for i in range(n):
        kids = list(tree.children[i])
        if not kids:
            continue
        p = np.array([tree.cond_prob[c] for c in kids])
        a, b = float(p @ lo[kids]), float(p @ hi[kids])
        tau = 0.0 if b - a <= 0 else min(1.0, max(0.0, (y1[i] - a) / (b - a)))
        for c in kids:
            y1[c] = lo[c] + tau * (hi[c] - lo[c])
    return Deflator(y0, y1)


# -- certification ---------------------------------------------------------------

@dataclass
class DeflatorReport:
    ok: bool
    nonnegative: bool
    in_spread: bool
    certificate: bool
    sampled: bool
    violations: list = field(default_factory=list)
    max_sampled_drift: float = 0.0
    root_drift: tuple[float, float] = (0.0, 0.0)
    certificate_necessary: bool = False

    def to_dict(self) -> dict:
        return {
            "ok": self.ok, "nonnegative": self.nonnegative, "in_spread": self.in_spread,
            "certificate": self.certificate, "sampled": self.sampled,
            "violations": self.violations, "max_sampled_drift": self.max_sampled_drift,
            "root_drift": list(self.root_drift),
            "certificate_necessary": self.certificate_necessary,
        }


def verify_deflator(market: MarketSpec, deflator: Deflator, *, k: int = 50, seed: int = 0,
                    tol: float = CERT_TOL, cones: SolvencyCones | None = None) -> DeflatorReport:
    """Certificate checks plus direct supermartingale checks on sampled strategies."""
    tree = market.tree
    n = tree.size
    y0, y1 = np.asarray(deflator.y0, float), np.asarray(deflator.y1, float)
    if y0.shape != (n,) or y1.shape != (n,):
        raise ValueError("deflator/tree shape mismatch")
    cones = cones or solvency_cones(market)
    S, B = market.ask, market.bid
    viol = []
    nonneg = bool(np.all(y0 >= -tol) and np.all(y1 >= -tol))
    if not nonneg:
        for i in np.flatnonzero((y0 < -tol) | (y1 < -tol)):
            viol.append(("nonnegative", tree.ids[i], float(min(y0[i], y1[i]))))
    spread = True
    for i in range(n):
        if y0[i] > 0:
            r = y1[i] / y0[i]
            if r < B[i] - tol * S[i] or r > S[i] * (1 + tol):
                spread = False
                viol.append(("spread", tree.ids[i], float(r)))
        elif abs(y1[i]) > tol:
            spread = False
            viol.append(("spread", tree.ids[i], float(y1[i])))
    cert = True
    for i in tree.internal:
        kids = list(tree.children[i])
        p = np.array([tree.cond_prob[c] for c in kids])
        d0 = y0[i] - float(p @ y0[kids])
        d1 = y1[i] - float(p @ y1[kids])
        sc = tol * max(1.0, y0[i], y1[i])
        for name, r in (("delta0", d0), ("delta1_low", d1 - cones.post_bid[i] * d0),
                        ("delta1_high", cones.post_ask[i] * d0 - d1)):
            if r < -sc:
                cert = False
                viol.append((name, tree.ids[i], float(r)))
    root_kids = list(tree.children[0])
    p = np.array([tree.cond_prob[c] for c in root_kids])
    root_drift = (float(p @ y0[root_kids] - y0[0]), float(p @ y1[root_kids] - y1[0]))

    rng = np.random.default_rng(seed)
    sampled = True
    worst = -math.inf
    for _ in range(k):
        strat = sample_admissible_strategy(market, 1.0, rng, cones)
        pre, post = strat.positions(tree)
        for i in range(n):
            v_pre = y0[i] * pre[i, 0] + y1[i] * pre[i, 1]
            v_post = y0[i] * post[i, 0] + y1[i] * post[i, 1]
            sc = tol * max(1.0, abs(v_pre))
            worst = max(worst, v_post - v_pre)
            if v_post > v_pre + sc:
                sampled = False
                viol.append(("sampled_trade", tree.ids[i], float(v_post - v_pre)))
            if tree.children[i]:
                kids = list(tree.children[i])
                nxt = math.fsum(tree.cond_prob[c] * (y0[c] * post[i, 0] + y1[c] * post[i, 1])
                                for c in kids)
                worst = max(worst, nxt - v_post)
                if nxt > v_post + sc:
                    sampled = False
                    viol.append(("sampled_drift", tree.ids[i], float(nxt - v_post)))
            elif v_post < -sc:
                sampled = False
                viol.append(("sampled_terminal", tree.ids[i], float(v_post)))
    necessary = bool(np.all(cones.regular(market)))
    ok = nonneg and spread and cert and sampled
    return DeflatorReport(ok, nonneg, spread, cert, sampled, viol[:50],
                          float(worst) if k else 0.0, root_drift, necessary)


# -- dual program -----------------------------------------------------------------

SOLVER_OPTIONS = {
    "CLARABEL": {"tol_gap_abs": 1e-12, "tol_gap_rel": 1e-12, "tol_feas": 1e-12, "max_iter": 500},
    "SCS": {"eps_abs": 1e-10, "eps_rel": 1e-10, "max_iters": 200_000},
    "CVXOPT": {"abstol": 1e-10, "reltol": 1e-10, "feastol": 1e-10},
}


def solver_options(solver: str) -> dict:
    return dict(SOLVER_OPTIONS.get(solver.upper(), {}))


def measure_conjugate_objective(cp, utility: Utility, q0_leaves, prob_leaves: np.ndarray, y: float = 1.0):
    """sum_i p_i V(y q_i / p_i) as a cvxpy expression in measure variables ``q``."""
    pl = np.asarray(prob_leaves, float)
    if utility.name == "log":
        return -pl @ cp.log(q0_leaves) + float(pl @ (np.log(pl) - math.log(y) - 1.0))
    k = utility.p / (utility.p - 1.0)
    coef = (1.0 / utility.p - 1.0) * y ** k * pl ** (1.0 - k)
    return coef @ cp.power(q0_leaves, k)


def flow_matrix(tree):
    """Rows: internal nodes; ``(F @ q)[r] = q[i] - sum of q over the children of i``."""
    import scipy.sparse as sp

    rows, cols, vals = [], [], []
    for r, i in enumerate(tree.internal):
        rows.append(r)
        cols.append(i)
        vals.append(1.0)
        for c in tree.children[i]:
            rows.append(r)
            cols.append(c)
            vals.append(-1.0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(tree.internal), tree.size))


def dual_value(market: MarketSpec, utility: Utility, y: float, *, yhat: float | None = None,
               solver: str = "CLARABEL") -> DualSolution:
    """Minimize E[V(Y0_T)] over certified deflators with Y0_0 = y.

    Variables are ``q = prob * Y / y``, so that every entry lies in [0, 1] and
    the one-step drift of ``Y`` at node ``i`` is ``y * (F @ q)[i] / prob_i``.
    """
    import cvxpy as cp

    if not y > 0:
        raise ValueError(f"dual scale must be positive, got {y}")
    tree = market.tree
    prob = np.asarray(tree.prob, float)
    cones = solvency_cones(market)
    internal = tree.internal
    F = flow_matrix(tree)
    leaves = tree.leaves
    q0 = cp.Variable(tree.size, nonneg=True)
    q1 = cp.Variable(tree.size, nonneg=True)
    d0 = F @ q0
    d1 = F @ q1
    cons = [
        q0[0] == 1.0,
        q1 >= cp.multiply(market.bid, q0),
        q1 <= cp.multiply(market.ask, q0),
        d0 >= 0,
        d1 >= cp.multiply(cones.post_bid[internal], d0),
        d1 <= cp.multiply(cones.post_ask[internal], d0),
    ]
    obj = cp.Minimize(measure_conjugate_objective(cp, utility, q0[leaves], prob[leaves], y))
    prob_ = cp.Problem(obj, cons)
    try:
        prob_.solve(solver=solver, **solver_options(solver))
    except cp.error.SolverError as exc:
        raise SolverError(f"dual program failed: {exc}") from exc
    if prob_.status not in ("optimal", "optimal_inaccurate") or q0.value is None:
        raise SolverError(f"dual program status {prob_.status}")
    y0 = y * np.maximum(np.asarray(q0.value, float), 0.0) / prob
    y1 = np.clip(y * np.asarray(q1.value, float) / prob, market.bid * y0, market.ask * y0)
    y0[0] = y
    defl = Deflator(y0, y1)
    return DualSolution(defl, deflator_dual_value(market, utility, defl), float(y), yhat, prob_.status)


# -- optimality relations ------------------------------------------------------------

@dataclass
class RelationReport:
    checks: dict = field(default_factory=dict)  # name -> {"ok": bool, "residual": float}

    @property
    def ok(self) -> bool:
        return all(c["ok"] for c in self.checks.values())

    @property
    def failed(self) -> list[str]:
        return [k for k, c in self.checks.items() if not c["ok"]]

    def add(self, name: str, residual: float, limit: float) -> None:
        self.checks[name] = {"ok": bool(residual <= limit), "residual": float(residual),
                             "limit": float(limit)}

    def to_dict(self) -> dict:
        return {"ok": self.ok, "checks": self.checks}


def _deflator_of(dual) -> Deflator:
    return dual.deflator if isinstance(dual, DualSolution) else dual


def verify_optimality_relations(market: MarketSpec, utility: Utility, x: float,
                                primal: Solution, dual, *, k: int = 50, seed: int = 0,
                                conj_tol: float = 1e-6) -> RelationReport:
    """Marginal-utility, budget, martingale and bipolar relations at the optimum."""
    tree = market.tree
    defl = _deflator_of(dual)
    y0, y1 = defl.y0, defl.y1
    y = defl.y
    rep = RelationReport()
    leaves = tree.leaves
    g = primal.terminal_cash
    h = y0[leaves]
    mu = np.asarray(utility.marginal(np.maximum(g, 1e-300)), float)
    rep.add("marginal_utility", float(np.max(np.abs(h - mu) / mu)), 1e-7)
    eg = math.fsum(tree.prob[i] * gi * hi for i, gi, hi in zip(leaves, g, h))
    rep.add("budget", abs(eg - x * y), 1e-7 * max(1.0, x * y))
    pre, post = primal.strategy.positions(tree)
    drift = 0.0
    for i in tree.internal:
        nxt = math.fsum(tree.cond_prob[c] * (y0[c] * post[i, 0] + y1[c] * post[i, 1])
                        for c in tree.children[i])
        drift = max(drift, abs(nxt - (y0[i] * pre[i, 0] + y1[i] * pre[i, 1])))
    rep.add("wealth_martingale", drift, 1e-8)
    rng = np.random.default_rng(seed)
    cones = solvency_cones(market)
    worst = -math.inf
    for _ in range(k):
        gs = sample_admissible_strategy(market, x, rng, cones).terminal_cash(tree)
        worst = max(worst, math.fsum(tree.prob[i] * a * b for i, a, b in zip(leaves, gs, h)) - x * y)
    rep.add("bipolar", max(worst, 0.0), 1e-9 * max(1.0, x * y))
    if isinstance(dual, DualSolution):
        rep.add("conjugacy", abs(primal.value - (dual.value + x * dual.y)), conj_tol)
    return rep


def verify_trade_alignment(market: MarketSpec, primal: Solution, dual, *,
                           trade_tol: float = 1e-9, tol: float = 1e-8) -> RelationReport:
    """Purchases happen where Y1/Y0 is the ask, sales where it is the bid."""
    tree = market.tree
    defl = _deflator_of(dual)
    ratio = defl.ratio
    S, B = market.ask, market.bid
    d1 = primal.strategy.dphi1
    buy = sell = 0.0
    for i in range(tree.size):
        if d1[i] > trade_tol:
            buy = max(buy, abs(ratio[i] - S[i]) / S[i])
        elif d1[i] < -trade_tol:
            sell = max(sell, abs(ratio[i] - B[i]) / S[i])
    rep = RelationReport()
    rep.add("buy_at_ask", buy, tol)
    rep.add("sell_at_bid", sell, tol)
    pre, _ = primal.strategy.positions(tree)
    wealth = frictionless_wealth(primal.strategy, ratio, primal.x, tree)
    lhs = defl.y0 * pre[:, 0] + defl.y1 * pre[:, 1]
    rhs = defl.y0 * wealth
    rep.add("wealth_identity", float(np.max(np.abs(lhs - rhs) / np.maximum(1.0, np.abs(rhs)))), tol)
    return rep


@dataclass
class LocalShadowReport:
    ok: bool
    samples: int
    max_violation: float
    zero_residual: float
    vacuous: int
    strict: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def verify_local_shadow(market: MarketSpec, utility: Utility, x: float, primal: Solution,
                        dual, *, samples: int = 100, seed: int = 0,
                        tol: float = 1e-7) -> LocalShadowReport:
    """Superdifferential inequality of the conditional value at sampled deviations."""
    tree = market.tree
    defl = _deflator_of(dual)
    eng = engine_for(market, utility)
    pre, _ = primal.strategy.positions(tree)
    rng = np.random.default_rng(seed)
    worst = -math.inf
    zero = 0.0
    vacuous = strict = 0
    for j in range(samples):
        i = int(rng.integers(tree.size))
        c, s = pre[i]
        base = eng.value(i, c, s)
        w = max(abs(c) + abs(s) * market.ask[i], 1e-12)
        kind = j % 4
        if kind == 0:
            dc, ds = 0.0, 0.0
        elif kind == 1:
            nu = rng.uniform(-0.5, 0.5) * w / market.ask[i]
            dc, ds = -nu * defl.y1[i] / defl.y0[i], nu
        elif kind == 2:
            dc, ds = rng.normal(scale=0.2 * w), rng.normal(scale=0.2 * w / market.ask[i])
        else:
            # push the liquidation value negative
            dc, ds = -(2.0 + rng.uniform()) * w, rng.uniform(-0.1, 0.1) * w / market.ask[i]
        lhs = eng.value(i, c + dc, s + ds)
        rhs = base + dc * defl.y0[i] + ds * defl.y1[i]
        if kind == 0:
            zero = max(zero, abs(lhs - rhs))
        if lhs == -math.inf:
            vacuous += 1
            continue
        gap = lhs - rhs
        worst = max(worst, gap)
        if gap < -tol:
            strict += 1
    limit_ok = worst <= tol * 1.0 if worst > -math.inf else True
    return LocalShadowReport(bool(limit_ok and zero <= tol), samples, float(worst), float(zero),
                             vacuous, strict)
