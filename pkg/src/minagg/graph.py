"""Attributed graphs and the Bellman-Ford operator.

Node features hold current distance estimates from a source; ``beta`` marks
nodes not yet reached. Edges are undirected, stored once as ``u < v`` and kept
in ascending ``(u, v)`` order so every downstream tie-break is deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np


class GraphValidationError(ValueError):
    """Raised when a graph breaks one of the attributed-graph invariants."""


class OracleTooLargeError(ValueError):
    """Raised when exhaustive walk enumeration is asked to do too much work."""


MAX_ORACLE_NODES = 8
MAX_ORACLE_STEPS = 6


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AttributedGraph:
    """Undirected weighted graph with one real feature per node.

    ``src[i] < dst[i]`` for every stored edge; self-loops are implicit with
    weight 0 and never stored.
    """

    n: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    features: np.ndarray
    beta: float
    step: int | None = None
    _neighbors: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        w = np.asarray(self.weight, dtype=np.float64).reshape(-1)
        x = np.asarray(self.features, dtype=np.float64).reshape(-1)
        if not (len(src) == len(dst) == len(w)):
            raise GraphValidationError("edge arrays differ in length")
        if len(x) != self.n:
            raise GraphValidationError(f"expected {self.n} features, got {len(x)}")
        if len(src):
            if np.any(src >= dst):
                raise GraphValidationError("edges must be stored as (u, v) with u < v")
            if src.min() < 0 or dst.max() >= self.n:
                raise GraphValidationError("edge endpoint out of range")
            order = np.lexsort((dst, src))
            src, dst, w = src[order], dst[order], w[order]
            key = src * self.n + dst
            if np.any(key[1:] == key[:-1]):
                raise GraphValidationError("duplicate edge")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise GraphValidationError("edge weights must be finite and non-negative")
        if not np.isfinite(self.beta) or self.beta <= 0:
            raise GraphValidationError("beta must be a positive finite number")
        if w.sum() >= self.beta:
            raise GraphValidationError(
                f"sum of edge weights {w.sum()!r} must be below beta {self.beta!r}"
            )
        object.__setattr__(self, "src", _frozen(src))
        object.__setattr__(self, "dst", _frozen(dst))
        object.__setattr__(self, "weight", _frozen(w))
        object.__setattr__(self, "features", _frozen(x))
        object.__setattr__(self, "beta", float(self.beta))

    # -- construction helpers ------------------------------------------------

    @classmethod
    def from_edges(
        cls,
        n: int,
        edges: Iterable[tuple[int, int, float]],
        features: Sequence[float],
        beta: float | None = None,
        step: int | None = None,
    ) -> "AttributedGraph":
        triples = [(min(u, v), max(u, v), float(w)) for u, v, w in edges]
        if any(u == v for u, v, _ in triples):
            raise GraphValidationError("explicit self-loops are not allowed")
        src = np.array([t[0] for t in triples], dtype=np.int64)
        dst = np.array([t[1] for t in triples], dtype=np.int64)
        w = np.array([t[2] for t in triples], dtype=np.float64)
        if beta is None:
            beta = default_beta(w)
        return cls(n, src, dst, w, np.asarray(features, dtype=np.float64), beta, step)

    def with_features(self, features, step: int | None = None) -> "AttributedGraph":
        """Same topology, weights and beta; new node features."""
        return AttributedGraph(
            self.n, self.src, self.dst, self.weight, np.asarray(features, dtype=np.float64),
            self.beta, step,
        )

    # -- views -----------------------------------------------------------------

    @property
    def num_edges(self) -> int:
        return len(self.src)

    def edges(self) -> list[tuple[int, int, float]]:
        return [(int(u), int(v), float(w)) for u, v, w in zip(self.src, self.dst, self.weight)]

    def neighbors(self, v: int) -> "NeighborView":
        """Neighborhood of ``v`` including ``v`` itself at weight 0, ascending by id."""
        if self._neighbors is None:
            adj: list[list[tuple[int, float]]] = [[(i, 0.0)] for i in range(self.n)]
            for u, w_, x in zip(self.src.tolist(), self.dst.tolist(), self.weight.tolist()):
                adj[u].append((w_, x))
                adj[w_].append((u, x))
            for row in adj:
                row.sort(key=lambda t: t[0])
            object.__setattr__(self, "_neighbors", adj)
        return NeighborView(v, tuple(self._neighbors[v]))

    def validate(self) -> None:
        """Check feature invariants on top of the structural ones."""
        x = self.features
        if np.any(~np.isfinite(x)) or np.any(x < 0) or np.any(x > self.beta):
            raise GraphValidationError("node features must lie in [0, beta]")

    def same_as(self, other: "AttributedGraph") -> bool:
        return (
            self.n == other.n
            and self.beta == other.beta
            and self.step == other.step
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.weight, other.weight)
            and np.array_equal(self.features, other.features)
        )

    def same_instance(self, other: "AttributedGraph") -> bool:
        """Equality ignoring the ``step`` metadata tag."""
        return self.with_features(self.features, other.step).same_as(other)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": int(self.n),
            "beta": float(self.beta),
            "step": self.step,
            "features": [float(v) for v in self.features],
            "edges": [[u, v, w] for u, v, w in self.edges()],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AttributedGraph":
        try:
            edges = [(int(u), int(v), float(w)) for u, v, w in d["edges"]]
            for u, v, _ in edges:
                if u >= v:
                    raise GraphValidationError("graph JSON edges must satisfy u < v")
            return cls.from_edges(
                int(d["n"]), edges, [float(x) for x in d["features"]],
                beta=float(d["beta"]), step=d.get("step"),
            )
        except (KeyError, TypeError) as exc:
            raise GraphValidationError(f"malformed graph JSON: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "AttributedGraph":
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True)
class NeighborView:
    node: int
    neighbors: tuple[tuple[int, float], ...]


def default_beta(weights) -> float:
    """Smallest conventional sentinel: total edge weight plus one."""
    return float(np.sum(np.asarray(weights, dtype=np.float64))) + 1.0


def _directed(g: AttributedGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Both edge directions, as (from, to, weight)."""
    frm = np.concatenate([g.src, g.dst])
    to = np.concatenate([g.dst, g.src])
    w = np.concatenate([g.weight, g.weight])
    return frm, to, w


def bf_step(g: AttributedGraph) -> AttributedGraph:
    """One Bellman-Ford relaxation: ``x'_v = min_u {x_u + w_uv}`` over ``N(v) ∪ {v}``."""
    g.validate()
    return g.with_features(_relax(g, g.features), None if g.step is None else g.step + 1)


def _relax(g: AttributedGraph, x: np.ndarray) -> np.ndarray:
    frm, to, w = _directed(g)
    out = x.copy()  # self-loop candidate x_v + 0
    np.minimum.at(out, to, x[frm] + w)
    return out


def bf_k(g: AttributedGraph, k: int) -> AttributedGraph:
    """``k``-fold composition of :func:`bf_step`."""
    if k < 0:
        raise ValueError("k must be non-negative")
    g.validate()
    x = g.features
    for _ in range(k):
        x = _relax(g, x)
    step = None if g.step is None else g.step + k
    return g.with_features(x, step)


def reachable_nodes(g: AttributedGraph) -> set[int]:
    return {int(v) for v in np.flatnonzero(g.features != g.beta)}


def reachable_mask(g: AttributedGraph) -> np.ndarray:
    return g.features != g.beta


def brute_force_khop(g: AttributedGraph, k: int) -> np.ndarray:
    """Independent oracle for ``bf_k``: exhaustive enumeration of walks.

    For every node ``u`` and every walk of at most ``k`` edges starting at
    ``u``, the walk cost is ``x_u`` plus the edge weights summed in walk order;
    each node keeps the cheapest walk ending at it.
    """
    if g.n > MAX_ORACLE_NODES or k > MAX_ORACLE_STEPS:
        raise OracleTooLargeError(
            f"walk enumeration is capped at {MAX_ORACLE_NODES} nodes and "
            f"{MAX_ORACLE_STEPS} steps (got n={g.n}, k={k})"
        )
    if k < 0:
        raise ValueError("k must be non-negative")
    adj: list[list[tuple[int, float]]] = [[] for _ in range(g.n)]
    for u, v, w in g.edges():
        adj[u].append((v, w))
        adj[v].append((u, w))
    best = [float(x) for x in g.features]

    def walk(node: int, cost: float, remaining: int) -> None:
        if cost < best[node]:
            best[node] = cost
        if remaining == 0:
            return
        for nxt, w in adj[node]:
            walk(nxt, cost + w, remaining - 1)

    for u in range(g.n):
        walk(u, float(g.features[u]), k)
    return np.array(best, dtype=np.float64)


def dumps_graphs(graphs: Sequence[AttributedGraph]) -> str:
    return json.dumps([g.to_dict() for g in graphs])


def loads_graphs(s: str) -> list[AttributedGraph]:
    data = json.loads(s)
    if isinstance(data, dict):
        data = [data]
    return [AttributedGraph.from_dict(d) for d in data]
