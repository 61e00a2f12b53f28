"""Training and test constructions: path instances, the scale grid, the ladder
gadget, the K-step training set and seeded random test suites."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .graph import AttributedGraph, GraphValidationError, bf_k, default_beta, reachable_mask


@dataclass(frozen=True, eq=False)
class LabeledPair:
    input: AttributedGraph
    target: AttributedGraph
    k_steps: int

    def to_dict(self) -> dict:
        return {"input": self.input.to_dict(), "target": self.target.to_dict()}


def make_pair(g: AttributedGraph, k_steps: int) -> LabeledPair:
    return LabeledPair(g, bf_k(g, k_steps), k_steps)


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    name: str
    k_steps: int
    pairs: tuple[LabeledPair, ...]
    total_reachable: int = field(default=-1)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        m = count_reachable(p.target for p in self.pairs)
        if self.total_reachable == -1:
            object.__setattr__(self, "total_reachable", m)
        elif self.total_reachable != m:
            raise GraphValidationError(
                f"manifest M={self.total_reachable} disagrees with recount {m}"
            )

    @property
    def M(self) -> int:
        return self.total_reachable

    def inputs(self) -> list[AttributedGraph]:
        return [p.input for p in self.pairs]

    def extended(self, name: str, graphs: Iterable[AttributedGraph]) -> "DatasetManifest":
        extra = [make_pair(g, self.k_steps) for g in graphs]
        return DatasetManifest(name, self.k_steps, self.pairs + tuple(extra))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "K": self.k_steps,
            "M": self.total_reachable,
            "pairs": [p.to_dict() for p in self.pairs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        k = int(d["K"])
        pairs = []
        for raw in d["pairs"]:
            pair = LabeledPair(
                AttributedGraph.from_dict(raw["input"]),
                AttributedGraph.from_dict(raw["target"]),
                k,
            )
            pairs.append(pair)
        return cls(d["name"], k, tuple(pairs), int(d["M"]))

    @classmethod
    def from_json(cls, s: str) -> "DatasetManifest":
        return cls.from_dict(json.loads(s))


def count_reachable(graphs: Iterable[AttributedGraph]) -> int:
    """Total non-sentinel features. Manifests count their targets, so a node
    is supervised whenever it is reached within the K steps being learned."""
    return int(sum(int(reachable_mask(g).sum()) for g in graphs))


def verify_manifest(manifest: DatasetManifest) -> list[int]:
    """Indices of pairs whose stored target is not ``bf_k(input, K)``."""
    bad = []
    for i, p in enumerate(manifest.pairs):
        expected = bf_k(p.input, manifest.k_steps)
        if not expected.same_as(p.target):
            bad.append(i)
    return bad


# -- deterministic constructions -----------------------------------------------


def gen_path(t: int, weights: Sequence[float], beta: float | None = None) -> AttributedGraph:
    """Path ``v_0 - ... - v_k`` whose features are the ``t``-step distances from ``v_0``."""
    if len(weights) == 0:
        raise ValueError("a path needs at least one edge")
    if t < 0:
        raise ValueError("step must be non-negative")
    w = [float(a) for a in weights]
    if any(a < 0 for a in w):
        raise GraphValidationError("negative edge weight")
    k = len(w)
    if beta is None:
        beta = default_beta(w)
    x0 = [0.0] + [beta] * k
    g0 = AttributedGraph.from_edges(k + 1, [(i, i + 1, w[i]) for i in range(k)], x0, beta, 0)
    return bf_k(g0, t)


def h_small_inputs() -> list[AttributedGraph]:
    graphs = [gen_path(0, [2.0 * i]) for i in range(1, 5)]
    graphs += [gen_path(1, [2.0 * i, 0.0]) for i in range(5, 9)]
    return graphs


def gen_h_small() -> DatasetManifest:
    """Eight one- and two-edge paths labeled with a single BF step."""
    return DatasetManifest("h_small", 1, tuple(make_pair(g, 1) for g in h_small_inputs()))


def gen_scale_set(K: int, k_range: Iterable[int] | None = None) -> list[AttributedGraph]:
    """Step-1 paths with ``K+1`` edges: first edge ``a``, edge ``k+1`` equal to ``b``."""
    if K < 1:
        raise ValueError("K must be at least 1")
    ks = sorted(set(range(1, K + 1) if k_range is None else k_range))
    if any(k < 1 or k > K for k in ks):
        raise ValueError(f"k_range must lie within 1..{K}")
    out = []
    for k in ks:
        for a in range(0, 2 * K + 1):
            for b in (0, 2 * K + 1):
                w = [0.0] * (K + 1)
                w[0] = float(a)
                w[k] = float(b)
                out.append(gen_path(1, w))
    return out


def gen_gadget_h(K: int) -> AttributedGraph:
    """Ladder gadget: zero-weight rails ``v`` and ``u``, unit-weight crossing rungs.

    Node ids: ``v_i -> i`` and ``u_i -> K + 1 + i``.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    v = lambda i: i  # noqa: E731
    u = lambda i: K + 1 + i  # noqa: E731
    edges = []
    for i in range(1, K + 1):
        edges.append((v(i - 1), v(i), 0.0))
        edges.append((u(i - 1), u(i), 0.0))
        edges.append((u(i - 1), v(i), 1.0))
        edges.append((v(i - 1), u(i), 1.0))
    n = 2 * K + 2
    beta = default_beta([e[2] for e in edges])
    x = [beta] * n
    x[v(0)] = 0.0
    return AttributedGraph.from_edges(n, edges, x, beta, 0)


def gk_members(K: int, k_range: Iterable[int] | None = None) -> list[AttributedGraph]:
    return gen_scale_set(K, k_range) + [
        gen_path(0, [1.0]),
        gen_path(1, [1.0, 0.0]),
        gen_gadget_h(K),
    ]


def gen_gk(K: int, k_range: Iterable[int] | None = None) -> DatasetManifest:
    """Scale grid plus the unit paths and the gadget, labeled with ``K`` BF steps."""
    pairs = tuple(make_pair(g, K) for g in gk_members(K, k_range))
    return DatasetManifest(f"G_{K}", K, pairs)


def gen_experiment_train(K: int = 2, seed: int = 0, k_range=None) -> DatasetManifest:
    """``G_2`` plus four 3-node step-0 paths and four 5-node step-2 paths.

    Extra edge weights are integers drawn uniformly from 1..8.
    """
    if K != 2:
        raise ValueError("the experiment training set is defined for K = 2")
    rng = np.random.default_rng(seed)
    extra = [gen_path(0, rng.integers(1, 9, size=2).astype(float)) for _ in range(4)]
    extra += [gen_path(2, rng.integers(1, 9, size=4).astype(float)) for _ in range(4)]
    return gen_gk(K, k_range).extended(f"experiment_K{K}_seed{seed}", extra)


# -- random test graphs --------------------------------------------------------


def _step0(n: int, src, dst, w, source: int = 0) -> AttributedGraph:
    beta = default_beta(w)
    x = np.full(n, beta)
    x[source] = 0.0
    return AttributedGraph(n, np.asarray(src), np.asarray(dst), np.asarray(w, dtype=float), x, beta, 0)


def random_cycle(n: int, rng: np.random.Generator, wmax: float = 10.0) -> AttributedGraph:
    src = np.arange(n)
    dst = (src + 1) % n
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    return _step0(n, lo, hi, rng.uniform(0.0, wmax, size=n))


def random_complete(n: int, rng: np.random.Generator, wmax: float = 10.0) -> AttributedGraph:
    src, dst = np.triu_indices(n, 1)
    return _step0(n, src, dst, rng.uniform(0.0, wmax, size=len(src)))


def random_er(n: int, p: float, rng: np.random.Generator, wmax: float = 10.0) -> AttributedGraph:
    src, dst = np.triu_indices(n, 1)
    keep = rng.random(len(src)) < p
    src, dst = src[keep], dst[keep]
    return _step0(n, src, dst, rng.uniform(0.0, wmax, size=len(src)))


def gen_test_suite(seed: int = 0, per_family: int = 50) -> list[AttributedGraph]:
    """Mixed suite: 3-cycles, 4-cycles, complete graphs and dense ER graphs."""
    rng = np.random.default_rng(seed)
    suite = [random_cycle(3, rng) for _ in range(per_family)]
    suite += [random_cycle(4, rng) for _ in range(per_family)]
    for _ in range(per_family):
        n = int(round(np.exp(rng.uniform(np.log(5), np.log(200)))))
        suite.append(random_complete(n, rng))
    for _ in range(per_family):
        suite.append(random_er(int(rng.integers(5, 51)), 0.5, rng))
    return suite


def gen_er_sparse(n: int, seed: int = 0) -> AttributedGraph:
    """ER graph with expected degree 5 (``p = 5 / n``)."""
    if n < 6:
        raise ValueError("n must be at least 6")
    return random_er(n, 5.0 / n, np.random.default_rng(seed))


def gen_er_family(n: int, count: int, seed: int = 0) -> list[AttributedGraph]:
    ss = np.random.SeedSequence(seed)
    return [gen_er_sparse(n, int(child.generate_state(1, np.uint64)[0])) for child in ss.spawn(count)]
