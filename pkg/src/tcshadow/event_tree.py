"""Finite event trees carrying an ask-price process.

Probabilities are stored per edge (conditional on the parent).  Nodes are
addressed by string ids externally and by their position in ``tree.ids``
internally; every per-node array in the package is aligned with that order,
which is breadth-first (parents before children).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

PROB_SUM_TOL = 1e-12
DERIVED_SUM_TOL = 1e-10


class TreeValidationError(ValueError):
    """Raised when a tree or market violates a structural invariant."""


@dataclass(frozen=True)
class Node:
    id: str
    time: int
    parent: str | None
    cond_prob: float
    ask: float


@dataclass(frozen=True)
class Validation:
    ok: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.ok


class EventTree:
    """Immutable finite tree with conditional edge probabilities and ask prices."""

    def __init__(self, nodes: Sequence[Node], horizon: int):
        self.horizon = int(horizon)
        self._raw = tuple(nodes)
        by_id: dict[str, Node] = {}
        for node in self._raw:
            if node.id in by_id:
                raise TreeValidationError(f"duplicate node id {node.id!r}")
            by_id[node.id] = node
        roots = [n for n in self._raw if n.parent is None]
        if len(roots) != 1:
            raise TreeValidationError(f"expected exactly one root, found {len(roots)}")
        kids: dict[str, list[str]] = {nid: [] for nid in by_id}
        for node in self._raw:
            if node.parent is not None:
                if node.parent not in by_id:
                    raise TreeValidationError(
                        f"dangling node {node.id!r}: parent {node.parent!r} unknown")
                kids[node.parent].append(node.id)

        # breadth-first order keeps parents ahead of children
        order = [roots[0].id]
        head = 0
        while head < len(order):
            order.extend(kids[order[head]])
            head += 1
        if len(order) != len(by_id):
            raise TreeValidationError("tree is not connected (cycle or orphan nodes)")

        self.ids: tuple[str, ...] = tuple(order)
        self.index: dict[str, int] = {nid: i for i, nid in enumerate(order)}
        self.nodes: dict[str, Node] = {nid: by_id[nid] for nid in order}
        n = len(order)
        self.parent = np.full(n, -1, dtype=int)
        self.time = np.zeros(n, dtype=int)
        self.cond_prob = np.zeros(n)
        self.ask = np.zeros(n)
        for i, nid in enumerate(order):
            node = by_id[nid]
            self.parent[i] = -1 if node.parent is None else self.index[node.parent]
            self.time[i] = node.time
            self.cond_prob[i] = node.cond_prob
            self.ask[i] = node.ask
        self.children: tuple[tuple[int, ...], ...] = tuple(
            tuple(self.index[c] for c in kids[nid]) for nid in order)
        self.prob = np.zeros(n)
        self.prob[0] = self.cond_prob[0]
        for i in range(1, n):
            self.prob[i] = self.prob[self.parent[i]] * self.cond_prob[i]
        for arr in (self.parent, self.time, self.cond_prob, self.ask, self.prob):
            arr.setflags(write=False)

    # -- structure -----------------------------------------------------------
    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def root(self) -> int:
        return 0

    def is_leaf(self, i: int) -> bool:
        return not self.children[i]

    @property
    def leaves(self) -> list[int]:
        return [i for i in range(self.size) if not self.children[i]]

    @property
    def internal(self) -> list[int]:
        return [i for i in range(self.size) if self.children[i]]

    def nodes_at(self, t: int) -> list[int]:
        return [i for i in range(self.size) if self.time[i] == t]

    def path(self, i: int) -> list[int]:
        """Indices from the root down to ``i``."""
        out = [i]
        while self.parent[out[-1]] >= 0:
            out.append(int(self.parent[out[-1]]))
        return out[::-1]

    def subtree_postorder(self, i: int = 0) -> list[int]:
        out: list[int] = []
        stack = [(i, False)]
        while stack:
            j, done = stack.pop()
            if done:
                out.append(j)
            else:
                stack.append((j, True))
                stack.extend((c, False) for c in self.children[j])
        return out

    def resolve(self, node: str | int) -> int:
        if isinstance(node, (int, np.integer)):
            if not 0 <= node < self.size:
                raise KeyError(f"node index {node} out of range")
            return int(node)
        try:
            return self.index[node]
        except KeyError:
            raise KeyError(f"unknown node id {node!r}") from None

    def with_prices(self, price: Sequence[float]) -> "EventTree":
        """Same filtration and probabilities, different price process."""
        price = np.asarray(price, dtype=float)
        nodes = [Node(nid, self.nodes[nid].time, self.nodes[nid].parent,
                      self.nodes[nid].cond_prob, float(price[i]))
                 for i, nid in enumerate(self.ids)]
        return EventTree(nodes, self.horizon)

    # -- probability ---------------------------------------------------------
    def unconditional_prob(self, node: str | int) -> float:
        return float(self.prob[self.resolve(node)])

    def conditional_expectation(self, values, node: str | int) -> float:
        """E[values | node] over the children of ``node``.

        ``values`` is either an array aligned with the tree or a mapping from
        child ids to values.
        """
        i = self.resolve(node)
        if not self.children[i]:
            raise ValueError(f"node {self.ids[i]!r} is a leaf")
        total = 0.0
        for c in self.children[i]:
            if isinstance(values, Mapping):
                key = self.ids[c]
                if key not in values:
                    raise KeyError(f"missing value for child {key!r}")
                v = values[key]
            else:
                v = values[c]
            total += self.cond_prob[c] * v
        return float(total)

    def drift(self, values) -> np.ndarray:
        """One-step conditional drift E[X_{t+1}|node] - X_node; zero at leaves."""
        values = np.asarray(values, dtype=float)
        out = np.zeros(self.size)
        for i in self.internal:
            out[i] = self.conditional_expectation(values, i) - values[i]
        return out

    def expectation_leaves(self, values) -> float:
        values = np.asarray(values, dtype=float)
        return float(sum(self.prob[i] * values[i] for i in self.leaves))


def validate(tree: EventTree) -> Validation:
    """Check the node and tree invariants; report the first violation."""
    if tree.horizon < 1:
        return Validation(False, "horizon must be >= 1")
    for i, nid in enumerate(tree.ids):
        node = tree.nodes[nid]
        if not (node.ask > 0 and math.isfinite(node.ask)):
            return Validation(False, f"nonpositive price at node {nid!r}")
        if i == 0:
            if node.time != 0 or abs(node.cond_prob - 1.0) > PROB_SUM_TOL:
                return Validation(False, "root must have time 0 and probability 1")
            continue
        if not (0.0 < node.cond_prob <= 1.0):
            return Validation(False, f"probability outside (0, 1] at node {nid!r}")
        if node.time != tree.time[tree.parent[i]] + 1:
            return Validation(False, f"node {nid!r} is not one period after its parent")
    for i in tree.internal:
        s = sum(tree.cond_prob[c] for c in tree.children[i])
        if abs(s - 1.0) > PROB_SUM_TOL:
            return Validation(False, f"child probabilities of {tree.ids[i]!r} sum to {s!r}, not 1")
    for i in tree.leaves:
        if tree.time[i] != tree.horizon:
            return Validation(False, f"leaf at wrong depth: {tree.ids[i]!r} at time {tree.time[i]}")
    return Validation(True)


def ensure_valid(tree: EventTree) -> None:
    result = validate(tree)
    if not result:
        raise TreeValidationError(result.reason)


@dataclass(frozen=True)
class MarketSpec:
    """Ask-price tree plus a proportional transaction cost.

    ``lam`` lies in (0, 1) for a genuine frictional market; ``lam == 0`` is
    accepted for the frictionless reduction.
    """

    tree: EventTree
    lam: float

    def __post_init__(self):
        if not (0.0 <= self.lam < 1.0):
            raise TreeValidationError(f"transaction cost must lie in [0, 1), got {self.lam}")

    @property
    def ask(self) -> np.ndarray:
        return self.tree.ask

    @property
    def bid(self) -> np.ndarray:
        return (1.0 - self.lam) * self.tree.ask

    def with_lambda(self, lam: float) -> "MarketSpec":
        return MarketSpec(self.tree, lam)


# -- JSON -------------------------------------------------------------------

_MARKET_KEYS = {"lambda", "horizon", "nodes"}
_NODE_KEYS = {"id", "parent", "prob", "ask"}


def market_from_dict(data: Mapping) -> MarketSpec:
    if not isinstance(data, Mapping):
        raise TreeValidationError("market must be a JSON object")
    extra = set(data) - _MARKET_KEYS
    if extra:
        raise TreeValidationError(f"unknown market fields: {sorted(extra)}")
    missing = _MARKET_KEYS - set(data)
    if missing:
        raise TreeValidationError(f"missing market fields: {sorted(missing)}")
    raw = data["nodes"]
    parents = {}
    for entry in raw:
        extra = set(entry) - _NODE_KEYS
        if extra:
            raise TreeValidationError(f"unknown node fields: {sorted(extra)}")
        if _NODE_KEYS - set(entry):
            raise TreeValidationError(f"node entry missing fields: {sorted(_NODE_KEYS - set(entry))}")
        parents[str(entry["id"])] = entry["parent"]

    def depth(nid, seen=()):
        p = parents.get(nid)
        if p is None:
            return 0
        if nid in seen or p not in parents:
            raise TreeValidationError(f"dangling node {nid!r}")
        return 1 + depth(p, seen + (nid,))

    nodes = [Node(str(e["id"]), depth(str(e["id"])),
                  None if e["parent"] is None else str(e["parent"]),
                  float(e["prob"]), float(e["ask"])) for e in raw]
    tree = EventTree(nodes, int(data["horizon"]))
    ensure_valid(tree)
    return MarketSpec(tree, float(data["lambda"]))


def market_to_dict(market: MarketSpec) -> dict:
    tree = market.tree
    return {
        "lambda": market.lam,
        "horizon": tree.horizon,
        "nodes": [
            {"id": nid, "parent": tree.nodes[nid].parent,
             "prob": tree.nodes[nid].cond_prob, "ask": tree.nodes[nid].ask}
            for nid in tree.ids
        ],
    }


def load_market(path: str | Path) -> MarketSpec:
    with open(path) as fh:
        return market_from_dict(json.load(fh))


def save_market(market: MarketSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(market_to_dict(market), indent=2) + "\n")


# -- builders ---------------------------------------------------------------

def build_tree(spec: Sequence[tuple[str, str | None, float, float]]) -> EventTree:
    """Build a tree from ``(id, parent, cond_prob, ask)`` rows; times inferred."""
    times: dict[str, int] = {}
    rows = list(spec)
    for nid, parent, _, _ in rows:
        times[nid] = 0 if parent is None else times[parent] + 1
    nodes = [Node(nid, times[nid], parent, float(p), float(a)) for nid, parent, p, a in rows]
    return EventTree(nodes, max(times.values()))


def binomial_tree(s0: float, up: float, down: float, p_up: float, horizon: int) -> EventTree:
    rows = [("r", None, 1.0, s0)]
    frontier = [("r", s0)]
    for _ in range(horizon):
        nxt = []
        for nid, s in frontier:
            for tag, mult, p in (("u", up, p_up), ("d", down, 1.0 - p_up)):
                cid = nid + tag
                rows.append((cid, nid, p, s * mult))
                nxt.append((cid, s * mult))
        frontier = nxt
    return build_tree(rows)


def random_market(rng: np.random.Generator, horizon: int = 2, max_branching: int = 3,
                  lam: float = 0.02, drift_scale: float = 0.06) -> MarketSpec:
    """Random tree whose ask price is a perturbed martingale.

    Every internal node has a child strictly above and a child strictly below
    its own price, so the ask process is free of one-period arbitrage and
    bid/ask can move both ways at every step.
    """
    rows = [("n0", None, 1.0, float(rng.uniform(0.8, 1.5)))]
    frontier = [("n0", rows[0][3])]
    counter = 1
    for _ in range(horizon):
        nxt = []
        for nid, s in frontier:
            k = int(rng.integers(2, max_branching + 1))
            probs = rng.dirichlet(np.full(k, 3.0))
            probs = 0.1 / k + (1 - 0.1) * probs
            probs /= probs.sum()
            rets = np.sort(rng.uniform(-0.25, 0.25, size=k))
            rets[0] = min(rets[0], -0.05)
            rets[-1] = max(rets[-1], 0.05)
            # centre to a martingale, then tilt the mean
            rets = rets - probs @ rets + rng.uniform(-drift_scale, drift_scale)
            rets = np.clip(rets, -0.6, None)
            if rets[0] >= -0.01:
                rets[0] = -0.02
            if rets[-1] <= 0.01:
                rets[-1] = 0.02
            for j in range(k):
                cid = f"n{counter}"
                counter += 1
                rows.append((cid, nid, float(probs[j]), float(s * (1 + rets[j]))))
                nxt.append((cid, s * (1 + rets[j])))
        frontier = nxt
    # exact renormalisation so sums pass the 1e-12 check
    tree = build_tree(rows)
    fixed = []
    for nid in tree.ids:
        node = tree.nodes[nid]
        p = node.cond_prob
        if node.parent is not None:
            sib = [tree.nodes[tree.ids[c]].cond_prob
                   for c in tree.children[tree.index[node.parent]]]
            p = p / math.fsum(sib)
        fixed.append((nid, node.parent, p, node.ask))
    tree = build_tree(fixed)
    ensure_valid(tree)
    return MarketSpec(tree, lam)
