"""Min-aggregation GNN: forward pass, the hand-built Bellman-Ford weights and
structural analyses of trained parameters."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .graph import AttributedGraph
from .nn import Mlp, ShapeError, Tensor


class ConfigError(ValueError):
    pass


class CollapseError(ValueError):
    def __init__(self, message: str, report: "SparsityReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class MinAggConfig:
    L: int
    K: int
    m: int
    d: int
    d_ell: tuple[int, ...]
    hidden: int

    def __post_init__(self):
        object.__setattr__(self, "d_ell", tuple(int(v) for v in self.d_ell))
        if not (self.L >= self.K >= 1):
            raise ConfigError(f"need L >= K >= 1, got L={self.L}, K={self.K}")
        if self.m < 1 or self.d < 1 or self.hidden < 1:
            raise ConfigError("m, d and hidden must be positive")
        if len(self.d_ell) != self.L + 1:
            raise ConfigError(f"d_ell needs L+1 = {self.L + 1} entries, got {len(self.d_ell)}")
        if self.d_ell[0] != 1 or self.d_ell[-1] != 1:
            raise ConfigError("input and output feature widths must both be 1")
        if min(self.d_ell) < 1:
            raise ConfigError("feature widths must be positive")

    @classmethod
    def uniform(cls, L: int, K: int, m: int, d: int = 1, width: int = 1, hidden: int | None = None):
        """Config whose intermediate node features all have ``width`` channels."""
        d_ell = (1,) + (width,) * (L - 1) + (1,)
        return cls(L, K, m, d, d_ell, hidden if hidden is not None else d)

    @property
    def budget(self) -> int:
        """Nonzero count of the sparsest exact construction: ``mL + mK + K``."""
        return self.m * self.L + self.m * self.K + self.K

    def agg_dims(self, layer: int) -> list[int]:
        return [self.d_ell[layer - 1] + 1] + [self.hidden] * (self.m - 1) + [self.d]

    def up_dims(self, layer: int) -> list[int]:
        return [self.d + self.d_ell[layer - 1]] + [self.hidden] * (self.m - 1) + [self.d_ell[layer]]

    def to_dict(self) -> dict:
        return {"L": self.L, "K": self.K, "m": self.m, "d": self.d,
                "d_ell": list(self.d_ell), "hidden": self.hidden}

    @classmethod
    def from_dict(cls, d: dict) -> "MinAggConfig":
        try:
            return cls(int(d["L"]), int(d["K"]), int(d["m"]), int(d["d"]),
                       tuple(d["d_ell"]), int(d.get("hidden", d["d"])))
        except KeyError as exc:
            raise ConfigError(f"config is missing {exc}") from exc


PRESETS: dict[str, MinAggConfig] = {
    # two layers, 64-wide aggregation, 8 intermediate channels
    "paper-2layer": MinAggConfig(2, 2, 1, 64, (1, 8, 1), 64),
    "1layer-1step": MinAggConfig(1, 1, 1, 64, (1, 1), 64),
    "2layer-1step": MinAggConfig(2, 1, 1, 64, (1, 1, 1), 64),
    "2layer-2step": MinAggConfig(2, 2, 1, 64, (1, 1, 1), 64),
}


def preset(name: str) -> MinAggConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class MinAggGnnParams:
    config: MinAggConfig
    agg: list[Mlp]
    up: list[Mlp]

    def __post_init__(self):
        c = self.config
        if len(self.agg) != c.L or len(self.up) != c.L:
            raise ShapeError(f"expected {c.L} layers")
        for layer in range(1, c.L + 1):
            for net, dims, kind in ((self.agg[layer - 1], c.agg_dims(layer), "agg"),
                                    (self.up[layer - 1], c.up_dims(layer), "up")):
                got = [net.in_dim] + [W.shape[0] for W in net.weights]
                if got != dims:
                    raise ShapeError(f"layer {layer} {kind}: dims {got} != configured {dims}")

    @classmethod
    def zeros(cls, config: MinAggConfig) -> "MinAggGnnParams":
        return cls(config,
                   [Mlp.zeros(config.agg_dims(i)) for i in range(1, config.L + 1)],
                   [Mlp.zeros(config.up_dims(i)) for i in range(1, config.L + 1)])

    @classmethod
    def init(cls, config: MinAggConfig, seed: int | np.random.Generator) -> "MinAggGnnParams":
        rng = np.random.default_rng(seed)
        agg, up = [], []
        for i in range(1, config.L + 1):
            agg.append(Mlp.init(config.agg_dims(i), rng))
            up.append(Mlp.init(config.up_dims(i), rng))
        return cls(config, agg, up)

    def arrays(self) -> list[np.ndarray]:
        """All parameters in canonical order: per layer, aggregation then update."""
        out = []
        for a, u in zip(self.agg, self.up):
            out += a.arrays() + u.arrays()
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MinAggGnnParams":
        it = iter(arrays)
        agg, up = [], []
        for a, u in zip(self.agg, self.up):
            for src, dst in ((a, agg), (u, up)):
                ws, bs = [], []
                for _ in range(src.depth):
                    ws.append(np.array(next(it), dtype=np.float64))
                    bs.append(np.array(next(it), dtype=np.float64))
                dst.append(Mlp(ws, bs))
        return MinAggGnnParams(self.config, agg, up)

    def copy(self) -> "MinAggGnnParams":
        return self.with_arrays(self.arrays())

    @property
    def num_params(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    def to_dict(self) -> dict:
        layers = []
        for a, u in zip(self.agg, self.up):
            layers += nn.layers_to_json(a.weights, a.biases)
            layers += nn.layers_to_json(u.weights, u.biases)
        return {"arch": "minagg", "config": self.config.to_dict(), "layers": layers}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict, expect: MinAggConfig | None = None) -> "MinAggGnnParams":
        config = MinAggConfig.from_dict(d["config"])
        if expect is not None and expect != config:
            raise ConfigError(f"checkpoint config {config} does not match expected {expect}")
        ws, bs = nn.layers_from_json(d["layers"])
        if len(ws) != 2 * config.m * config.L:
            raise ShapeError(f"checkpoint has {len(ws)} layers, config needs {2 * config.m * config.L}")
        arrays = []
        for W, b in zip(ws, bs):
            arrays += [W, b]
        return cls.zeros(config).with_arrays(arrays)

    @classmethod
    def from_json(cls, s: str, expect: MinAggConfig | None = None) -> "MinAggGnnParams":
        return cls.from_dict(json.loads(s), expect)


# -- batching and forward ----------------------------------------------------------


@dataclass
class GraphBatch:
    """Disjoint union of graphs with messages sorted by (receiver, sender).

    Each node receives a zero-weight message from itself, so every receiver
    segment is non-empty.
    """

    graphs: list[AttributedGraph]
    offsets: np.ndarray
    features: np.ndarray
    msg_src: np.ndarray
    msg_weight: np.ndarray
    starts: np.ndarray
    groups: list

    @classmethod
    def build(cls, graphs: Sequence[AttributedGraph]) -> "GraphBatch":
        graphs = list(graphs)
        sizes = np.array([g.n for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        srcs, dsts, ws = [], [], []
        for g, off in zip(graphs, offsets[:-1]):
            nodes = np.arange(g.n)
            srcs += [g.src + off, g.dst + off, nodes + off]
            dsts += [g.dst + off, g.src + off, nodes + off]
            ws += [g.weight, g.weight, np.zeros(g.n)]
        src = np.concatenate(srcs) if srcs else np.zeros(0, np.int64)
        dst = np.concatenate(dsts) if dsts else np.zeros(0, np.int64)
        w = np.concatenate(ws) if ws else np.zeros(0)
        order = np.lexsort((src, dst))
        src, dst, w = src[order], dst[order], w[order]
        starts = np.searchsorted(dst, np.arange(offsets[-1]))
        feats = np.concatenate([g.features for g in graphs]) if graphs else np.zeros(0)
        return cls(graphs, offsets, feats, src, w, starts, nn.segment_groups(starts, len(src)))

    @property
    def num_nodes(self) -> int:
        return int(self.offsets[-1])

    def split(self, values: np.ndarray) -> list[np.ndarray]:
        return [values[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]


def _layer_leaves(params: MinAggGnnParams, leaves: Sequence[Tensor] | None):
    if leaves is None:
        leaves = [nn.constant(a) for a in params.arrays()]
    it = iter(leaves)
    out = []
    for a, u in zip(params.agg, params.up):
        agg = [(next(it), next(it)) for _ in range(a.depth)]
        up = [(next(it), next(it)) for _ in range(u.depth)]
        out.append((agg, up))
    return out


def forward_tensor(
    params: MinAggGnnParams,
    batch: GraphBatch,
    leaves: Sequence[Tensor] | None = None,
    features: np.ndarray | None = None,
) -> Tensor:
    """Recorded forward pass over a batch; returns the ``(N, 1)`` output features."""
    x = batch.features if features is None else features
    h = nn.constant(np.asarray(x, dtype=np.float64).reshape(-1, 1))
    edge_col = nn.constant(batch.msg_weight.reshape(-1, 1))
    for agg, up in _layer_leaves(params, leaves):
        msg = nn.concat(nn.gather_rows(h, batch.msg_src), edge_col)
        pooled = nn.segment_min(nn.mlp_apply(msg, agg), batch.starts, batch.groups)
        h = nn.mlp_apply(nn.concat(pooled, h), up)
    return h


def forward_values(params: MinAggGnnParams, batch: GraphBatch, features=None) -> np.ndarray:
    return forward_tensor(params, batch, None, features).value[:, 0]


def forward(params: MinAggGnnParams, g: AttributedGraph) -> AttributedGraph:
    """Apply all ``L`` layers; the output carries the final node features."""
    h = forward_values(params, GraphBatch.build([g]))
    step = None if g.step is None else g.step + params.config.K
    return g.with_features(h, step)


def forward_many(params: MinAggGnnParams, graphs: Sequence[AttributedGraph], reps: int = 1,
                 chunk_nodes: int = 20000) -> list[np.ndarray]:
    """Per-graph outputs of ``reps`` chained passes, batching graphs up to ``chunk_nodes``."""
    if reps < 1:
        raise ValueError("reps must be positive")
    out: list[np.ndarray] = []
    i = 0
    graphs = list(graphs)
    while i < len(graphs):
        j, nodes = i, 0
        while j < len(graphs) and (j == i or nodes + graphs[j].n <= chunk_nodes):
            nodes += graphs[j].n
            j += 1
        batch = GraphBatch.build(graphs[i:j])
        h = batch.features
        for _ in range(reps):
            h = forward_values(params, batch, h)
        out += batch.split(h)
        i = j
    return out


def iterate_model(params: MinAggGnnParams, g: AttributedGraph, reps: int) -> AttributedGraph:
    """``reps``-fold composition of :func:`forward`."""
    if reps < 1:
        raise ValueError("reps must be positive")
    for _ in range(reps):
        g = forward(params, g)
    return g


# -- the five-parameter variant ----------------------------------------------------


@dataclass(frozen=True)
class SimpleGnnParams:
    W11: float
    W12: float
    b1: float
    w2: float
    b2: float

    def as_minagg(self) -> MinAggGnnParams:
        """The same network written as a one-layer, one-channel min-aggregation GNN."""
        cfg = MinAggConfig(1, 1, 1, 1, (1, 1), 1)
        agg = Mlp([np.array([[self.W11, self.W12]])], [np.array([self.b1])])
        up = Mlp([np.array([[self.w2, 0.0]])], [np.array([self.b2])])
        return MinAggGnnParams(cfg, [agg], [up])


def simple_forward(p: SimpleGnnParams, g: AttributedGraph) -> AttributedGraph:
    """``h_v = relu(w2 * min_u relu(W11 x_u + W12 w_uv + b1) + b2)``."""
    x = g.features
    out = np.empty(g.n)
    for v in range(g.n):
        inner = min(max(p.W11 * x[u] + p.W12 * w + p.b1, 0.0) for u, w in g.neighbors(v).neighbors)
        out[v] = max(p.w2 * inner + p.b2, 0.0)
    return g.with_features(out, None if g.step is None else g.step + 1)


# -- exact construction ---------------------------------------------------------------


def build_exact_bf(config: MinAggConfig) -> MinAggGnnParams:
    """Sparse weights computing ``K`` BF steps, then ``L - K`` pass-through layers.

    Channel 0 carries the distance. Message-passing layers add the edge weight
    to the sender's channel 0; later layers copy the node's own channel 0 via
    the skip input. All biases are zero and every other entry is zero padding.
    """
    p = MinAggGnnParams.zeros(config)
    for layer in range(1, config.L + 1):
        agg, up = p.agg[layer - 1], p.up[layer - 1]
        if layer <= config.K:
            agg.weights[0][0, 0] = 1.0
            agg.weights[0][0, config.d_ell[layer - 1]] = 1.0
            up.weights[0][0, 0] = 1.0
        else:
            up.weights[0][0, config.d] = 1.0
        for W in agg.weights[1:] if layer <= config.K else []:
            W[0, 0] = 1.0
        for W in up.weights[1:]:
            W[0, 0] = 1.0
    return p


def count_nonzero(params: MinAggGnnParams, threshold: float = 0.0) -> int:
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    return int(sum(np.count_nonzero(np.abs(a) > threshold) for a in params.arrays()))


def l1_norm(params: MinAggGnnParams) -> float:
    return float(sum(np.abs(a).sum() for a in params.arrays()))


def prune_params(params: MinAggGnnParams, threshold: float) -> MinAggGnnParams:
    """Zero every entry with magnitude at or below ``threshold``."""
    return params.with_arrays([np.where(np.abs(a) > threshold, a, 0.0) for a in params.arrays()])


# -- sparsity pattern -----------------------------------------------------------------


@dataclass
class SparsityReport:
    ok: bool
    nonzero: int
    budget: int
    message_passing_layers: list[int]
    violations: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "nonzero": self.nonzero, "budget": self.budget,
                "message_passing_layers": self.message_passing_layers,
                "violations": self.violations}


def check_sparsity_structure(params: MinAggGnnParams, threshold: float = 1e-6) -> SparsityReport:
    """Compare the thresholded nonzero pattern with the minimal exact pattern.

    Minimal pattern: one nonzero per update matrix; in message-passing layers
    the first aggregation matrix has two nonzeros in one row (a node channel
    and the edge column) and later aggregation matrices one each; all other
    aggregation weights and all biases vanish.
    """
    c = params.config
    nz = lambda a: np.abs(a) > threshold  # noqa: E731
    violations: list[str] = []
    mp_layers: list[int] = []
    for layer in range(1, c.L + 1):
        agg, up = params.agg[layer - 1], params.up[layer - 1]
        d_in = c.d_ell[layer - 1]
        for kind, net in (("agg", agg), ("up", up)):
            for j, b in enumerate(net.biases, 1):
                if nz(b).any():
                    violations.append(f"layer {layer} {kind} bias {j}: {int(nz(b).sum())} nonzero")
        for j, W in enumerate(up.weights, 1):
            if nz(W).sum() != 1:
                violations.append(f"layer {layer} up W{j}: {int(nz(W).sum())} nonzero, expected 1")
        first = nz(agg.weights[0])
        if first[:, :d_in].any():
            mp_layers.append(layer)
            rows = np.flatnonzero(first.any(axis=1))
            if first.sum() != 2 or len(rows) != 1 or not first[rows[0], d_in]:
                violations.append(
                    f"layer {layer} agg W1: expected one node entry and the edge entry in a "
                    f"single row, found {int(first.sum())} nonzero over rows {rows.tolist()}"
                )
            for j, W in enumerate(agg.weights[1:], 2):
                if nz(W).sum() != 1:
                    violations.append(f"layer {layer} agg W{j}: {int(nz(W).sum())} nonzero, expected 1")
        else:
            for j, W in enumerate(agg.weights, 1):
                if nz(W).any():
                    violations.append(
                        f"layer {layer} agg W{j}: {int(nz(W).sum())} nonzero in a non-message-passing layer"
                    )
    if len(mp_layers) != c.K:
        violations.append(f"{len(mp_layers)} message-passing layers, expected {c.K}")
    total = count_nonzero(params, threshold)
    if total != c.budget:
        violations.append(f"{total} nonzero parameters, expected {c.budget}")
    return SparsityReport(not violations, total, c.budget, mp_layers, violations)


# -- collapsed form ---------------------------------------------------------------------


@dataclass
class CollapsedUpdate:
    mu: list[float]
    nu: list[float]

    def __post_init__(self):
        if len(self.mu) != len(self.nu):
            raise ValueError("mu and nu must have equal length")


def _chain(weights: Sequence[np.ndarray], entry: int, mask) -> tuple[float, int]:
    """Follow a one-nonzero-per-matrix chain from input channel ``entry``.

    Returns the gain on non-negative inputs (ReLU keeps the positive part of
    each factor) and the output channel; gain 0 if the chain is broken.
    """
    gain = 1.0
    for W in weights:
        r, col = np.argwhere(mask(W))[0]
        if col != entry:
            return 0.0, int(r)
        gain *= max(float(W[r, col]), 0.0)
        entry = int(r)
    return gain, entry


def collapse_params(params: MinAggGnnParams, threshold: float = 1e-6) -> CollapsedUpdate:
    """Reduce a minimally sparse model to ``h <- mu * min_u(h_u + nu * w)`` per BF step.

    Each layer acts on the single live channel as ``gamma * h`` (stationary) or
    ``gamma * min relu(rho * h_u + tau * w)`` (message passing). Stationary
    gains fold into the next message-passing node scale ``alpha``, trailing
    ones into the last ``gamma``; then ``gamma * min(alpha h + tau w)`` equals
    ``(gamma alpha) * min(h + (tau / alpha) w)``.
    """
    report = check_sparsity_structure(params, threshold)
    if not report.ok:
        raise CollapseError("sparsity structure check failed: " + "; ".join(report.violations), report)
    c = params.config
    mask = lambda W: np.abs(W) > threshold  # noqa: E731
    live = 0
    pending = 1.0
    alphas, taus, gammas = [], [], []
    for layer in range(1, c.L + 1):
        agg, up = params.agg[layer - 1], params.up[layer - 1]
        d_in = c.d_ell[layer - 1]
        if layer in report.message_passing_layers:
            W1 = agg.weights[0]
            r, node_col = [(int(a), int(b)) for a, b in np.argwhere(mask(W1)) if b != d_in][0]
            rho = float(W1[r, node_col]) if node_col == live else 0.0
            tau = float(W1[r, d_in])
            agg_gain, agg_out = _chain(agg.weights[1:], r, mask)
            up_gain, live = _chain(up.weights, agg_out, mask)
            alpha = rho * pending
            if alpha <= 0 or tau < 0:
                raise CollapseError(
                    f"layer {layer}: node scale {alpha!r} and edge scale {tau!r} must be "
                    "positive and non-negative for the min to factor", report)
            alphas.append(alpha)
            taus.append(tau)
            gammas.append(agg_gain * up_gain)
            pending = 1.0
        else:
            gain, live = _chain(up.weights, c.d + live, mask)
            pending *= gain
    gammas[-1] *= pending
    mu = [g * a for g, a in zip(gammas, alphas)]
    nu = [t / a for t, a in zip(taus, alphas)]
    return CollapsedUpdate(mu, nu)


def collapsed_forward(cu: CollapsedUpdate, g: AttributedGraph) -> np.ndarray:
    """Evaluate the collapsed recurrence directly on a graph."""
    frm = np.concatenate([g.src, g.dst])
    to = np.concatenate([g.dst, g.src])
    w = np.concatenate([g.weight, g.weight])
    h = g.features.copy()
    for mu, nu in zip(cu.mu, cu.nu):
        best = h.copy()
        np.minimum.at(best, to, h[frm] + nu * w)
        h = mu * best
    return h


# -- parameter summaries ----------------------------------------------------------------


@dataclass
class LayerSummary:
    node: np.ndarray
    edge: np.ndarray
    bias: np.ndarray


def _linearized(net: Mlp) -> np.ndarray:
    W = net.weights[0]
    for V in net.weights[1:]:
        W = V @ W
    return W


def param_summaries(params: MinAggGnnParams) -> list[LayerSummary]:
    """Per-layer products of update rows with aggregation columns.

    node: for each input channel j and output row i, ``W_up[i, :d] * W_agg[:, j]``,
    followed by the skip weights ``W_up[i, d:]``; edge: ``W_up[i, :d] * W_agg[:, edge]``;
    bias: all aggregation biases then all update biases. Deeper MLPs are
    summarized through the product of their weight matrices.
    """
    c = params.config
    out = []
    for layer in range(1, c.L + 1):
        A = _linearized(params.agg[layer - 1])
        U = _linearized(params.up[layer - 1])
        d_in = c.d_ell[layer - 1]
        node = [U[i, : c.d] * A[:, j] for j in range(d_in) for i in range(U.shape[0])]
        node += [U[i, c.d : c.d + d_in] for i in range(U.shape[0])]
        edge = [U[i, : c.d] * A[:, d_in] for i in range(U.shape[0])]
        bias = params.agg[layer - 1].biases + params.up[layer - 1].biases
        out.append(LayerSummary(np.concatenate(node), np.concatenate(edge), np.concatenate(bias)))
    return out


def summary_fields(params: MinAggGnnParams) -> tuple[list[str], np.ndarray]:
    """Flattened summaries with stable column names for trace output."""
    names, values = [], []
    for layer, s in enumerate(param_summaries(params), 1):
        for kind in ("node", "edge", "bias"):
            arr = getattr(s, kind)
            names += [f"l{layer}_{kind}_{i}" for i in range(len(arr))]
            values.append(arr)
    return names, np.concatenate(values)

