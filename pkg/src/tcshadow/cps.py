"""Consistent price systems: martingale pairs whose ratio stays in the spread."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .event_tree import EventTree, MarketSpec

MARTINGALE_TOL = 1e-10
ACCEPT = 1e-9


def default_lambda_prime(lam: float) -> float:
    """Spread used for the robust no-arbitrage check."""
    return 0.5 * lam


@dataclass(frozen=True)
class PriceSystem:
    z0: np.ndarray
    z1: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        return self.z1 / self.z0

    def check(self, market: MarketSpec, lam: float | None = None, tol: float = 1e-9) -> bool:
        lam = market.lam if lam is None else lam
        tree = market.tree
        S = market.ask
        r = self.ratio
        return bool(abs(self.z0[0] - 1.0) <= tol
                    and np.all(self.z0 > 0)
                    and is_martingale(tree, self.z0).ok
                    and is_martingale(tree, self.z1).ok
                    and np.all(r >= (1 - lam) * S * (1 - tol))
                    and np.all(r <= S * (1 + tol)))

    def to_dict(self, tree: EventTree) -> dict:
        return {"nodes": [{"node": nid, "z0": float(self.z0[i]), "z1": float(self.z1[i])}
                          for i, nid in enumerate(tree.ids)]}


@dataclass(frozen=True)
class CPSResult:
    feasible: bool
    margin: float
    lam_prime: float
    system: PriceSystem | None

    def to_dict(self) -> dict:
        return {"feasible": self.feasible, "margin": self.margin, "lambda_prime": self.lam_prime}


@dataclass(frozen=True)
class MartingaleReport:
    ok: bool
    max_drift: float
    drift: np.ndarray

    def to_dict(self) -> dict:
        return {"ok": self.ok, "max_drift": self.max_drift}


def is_martingale(tree: EventTree, values, tol: float = MARTINGALE_TOL) -> MartingaleReport:
    """One-step drift within ``tol`` relative to ``max(1, |value|)`` at every node."""
    values = np.asarray(values, dtype=float)
    if values.shape != (tree.size,):
        raise ValueError("values/tree shape mismatch")
    drift = tree.drift(values)
    scaled = np.abs(drift) / np.maximum(1.0, np.abs(values))
    m = float(np.max(scaled)) if drift.size else 0.0
    return MartingaleReport(m <= tol, m, drift)


def _rebuild(tree: EventTree, leaf_values: np.ndarray) -> np.ndarray:
    """Martingale with the given leaf values, by exact backward recursion."""
    out = np.array(leaf_values, dtype=float)
    for i in reversed(tree.internal):
        out[i] = math.fsum(tree.cond_prob[c] * out[c] for c in tree.children[i])
    return out


def _expectation_matrix(tree: EventTree) -> sp.csr_matrix:
    """Rows: internal nodes; ``(M @ v)[r] = v[i] - E[v | i]``."""
    rows, cols, vals = [], [], []
    for r, i in enumerate(tree.internal):
        rows.append(r)
        cols.append(i)
        vals.append(1.0)
        for c in tree.children[i]:
            rows.append(r)
            cols.append(c)
            vals.append(-tree.cond_prob[c])
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(tree.internal), tree.size))


def find_cps(market: MarketSpec, lam_prime: float | None = None,
             threshold: float = ACCEPT) -> CPSResult:
    """Maximize min Z0 over martingale pairs with Z1/Z0 in [(1-lam')S, S].

    The LP solution is polished by rebuilding both martingales exactly from
    their leaf values; the result is re-checked before it is returned.
    """
    lp = default_lambda_prime(market.lam) if lam_prime is None else float(lam_prime)
    if not 0.0 <= lp < 1.0:
        raise ValueError(f"lambda_prime must lie in [0, 1), got {lp}")
    tree = market.tree
    n = tree.size
    S = market.ask
    M = _expectation_matrix(tree)
    Z = sp.csr_matrix(M.shape)
    col = sp.csr_matrix((M.shape[0], 1))
    # variables: z0 (n), z1 (n), t
    A_eq = sp.vstack([
        sp.hstack([M, Z, col]),
        sp.hstack([Z, M, col]),
        sp.hstack([sp.csr_matrix(([1.0], ([0], [0])), shape=(1, n)),
                   sp.csr_matrix((1, n)), sp.csr_matrix((1, 1))]),
    ]).tocsr()
    b_eq = np.zeros(A_eq.shape[0])
    b_eq[-1] = 1.0
    I = sp.identity(n, format="csr")
    A_ub = sp.vstack([
        sp.hstack([sp.diags((1 - lp) * S), -I, sp.csr_matrix((n, 1))]),  # (1-lp) S z0 <= z1
        sp.hstack([-sp.diags(S), I, sp.csr_matrix((n, 1))]),             # z1 <= S z0
        sp.hstack([-I, sp.csr_matrix((n, n)), sp.csr_matrix(np.ones((n, 1)))]),  # t <= z0
    ]).tocsr()
    b_ub = np.zeros(A_ub.shape[0])
    c = np.zeros(2 * n + 1)
    c[-1] = -1.0
    bounds = [(0, None)] * (2 * n) + [(None, 1.0)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        return CPSResult(False, -math.inf, lp, None)
    t = float(res.x[-1])
    if t <= threshold:
        return CPSResult(False, t, lp, None)
    leaves = tree.leaves
    z0 = np.zeros(n)
    z1 = np.zeros(n)
    z0[leaves] = res.x[:n][leaves]
    z1[leaves] = np.clip(res.x[n:2 * n][leaves], (1 - lp) * S[leaves] * z0[leaves], S[leaves] * z0[leaves])
    z0 = _rebuild(tree, z0)
    z1 = _rebuild(tree, z1)
    z1 /= z0[0]
    z0 /= z0[0]
    return CPSResult(True, t, lp, PriceSystem(z0, z1))


def dual_value_via_cps(market: MarketSpec, utility, y: float, *,
                       solver: str = "CLARABEL") -> tuple[float, PriceSystem]:
    """inf over consistent price systems of E[V(y Z0_T)].

    Solved in measure variables ``q = prob * Z``: the martingale property
    becomes ``q_parent = sum(q_children)`` and all entries stay in [0, 1],
    which keeps deep, thin branches well conditioned.
    """
    import cvxpy as cp

    from .dual_solver import flow_matrix, measure_conjugate_objective, solver_options

    tree = market.tree
    n = tree.size
    prob = np.asarray(tree.prob, float)
    F = flow_matrix(tree)
    q0 = cp.Variable(n, nonneg=True)
    q1 = cp.Variable(n, nonneg=True)
    leaves = tree.leaves
    obj = measure_conjugate_objective(cp, utility, q0[leaves], prob[leaves], y)
    cons = [q0[0] == 1.0, F @ q0 == 0, F @ q1 == 0,
            q1 >= cp.multiply(market.bid, q0), q1 <= cp.multiply(market.ask, q0)]
    prob_ = cp.Problem(cp.Minimize(obj), cons)
    prob_.solve(solver=solver, **solver_options(solver))
    if prob_.status not in ("optimal", "optimal_inaccurate"):
        from .primal_solver import SolverError
        raise SolverError(f"CPS dual program status {prob_.status}")
    z0v = np.maximum(np.asarray(q0.value, float) / prob, 1e-300)
    z1v = np.clip(np.asarray(q1.value, float) / prob, market.bid * z0v, market.ask * z0v)
    value = math.fsum(tree.prob[i] * float(utility.conjugate(y * z0v[i])) for i in leaves)
    return value, PriceSystem(z0v, z1v)
