"""Reverse-mode differentiation over numpy arrays, ReLU MLPs and AdamW.

The tape records only the handful of operations the min-aggregation model
needs. Nodes hold a value, an accumulated gradient and a closure that pushes
the gradient to their parents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents: tuple = (), backward_fn: Callable | None = None,
                 requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar node."""
        if self.value.size != 1:
            raise ShapeError("backward() needs a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)


def leaf(value, requires_grad: bool = True) -> Tensor:
    return Tensor(value, requires_grad=requires_grad)


def constant(value) -> Tensor:
    return Tensor(value)


def _make(value, parents, fn) -> Tensor:
    t = Tensor(value, parents)
    if t.requires_grad:
        t.backward_fn = fn
    return t


# -- primitive ops ---------------------------------------------------------------


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Row-wise affine map ``x @ W.T + b``."""
    if x.value.shape[-1] != W.value.shape[1]:
        raise ShapeError(f"input width {x.value.shape[-1]} != weight columns {W.value.shape[1]}")
    out = x.value @ W.value.T + b.value

    def fn(g):
        if W.requires_grad:
            W._accumulate(g.T @ x.value)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ W.value)

    return _make(out, (x, W, b), fn)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0  # subgradient 0 at exactly 0

    def fn(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.value, 0.0), (x,), fn)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    n = x.value.shape[0]

    def fn(g):
        acc = np.zeros((n,) + g.shape[1:])
        np.add.at(acc, idx, g)
        x._accumulate(acc)

    return _make(x.value[idx], (x,), fn)


def concat(a: Tensor, b: Tensor) -> Tensor:
    k = a.value.shape[1]

    def fn(g):
        if a.requires_grad:
            a._accumulate(g[:, :k])
        if b.requires_grad:
            b._accumulate(g[:, k:])

    return _make(np.concatenate([a.value, b.value], axis=1), (a, b), fn)


def segment_groups(starts: np.ndarray, total: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Bucket segments by length: (segment ids, row index matrix) per length."""
    counts = np.diff(np.append(starts, total))
    if np.any(counts < 1):
        raise ShapeError("segments must be non-empty")
    groups = []
    for c in np.unique(counts):
        seg = np.flatnonzero(counts == c)
        groups.append((seg, starts[seg][:, None] + np.arange(c)))
    return groups


def segment_min(x: Tensor, starts: np.ndarray, groups=None) -> Tensor:
    """Column-wise minimum over consecutive row segments beginning at ``starts``.

    Segments must be non-empty. The gradient goes to the first row attaining
    the minimum in each segment and column.
    """
    v = x.value
    if groups is None:
        groups = segment_groups(starts, v.shape[0])
    mins = np.empty((len(starts), v.shape[1]))
    arg = np.empty((len(starts), v.shape[1]), dtype=np.int64)
    for seg, idx in groups:
        block = v[idx]
        k = block.argmin(axis=1)  # first occurrence on ties
        mins[seg] = np.take_along_axis(block, k[:, None, :], axis=1)[:, 0, :]
        arg[seg] = idx[np.arange(len(seg))[:, None], k]
    cols = np.broadcast_to(np.arange(v.shape[1]), arg.shape)

    def fn(g):
        acc = np.zeros_like(v)
        acc[arg, cols] = g
        x._accumulate(acc)

    return _make(mins, (x,), fn)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    take_a = a.value <= b.value

    def fn(g):
        if a.requires_grad:
            a._accumulate(np.where(take_a, g, 0.0))
        if b.requires_grad:
            b._accumulate(np.where(take_a, 0.0, g))

    return _make(np.where(take_a, a.value, b.value), (a, b), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.value.shape))

    return _make(a.value + b.value, (a, b), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.value.shape))

    return _make(a.value - b.value, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.value.shape))

    return _make(a.value * b.value, (a, b), fn)


def scale(x: Tensor, c: float) -> Tensor:
    def fn(g):
        x._accumulate(g * c)

    return _make(x.value * c, (x,), fn)


def square(x: Tensor) -> Tensor:
    def fn(g):
        x._accumulate(2.0 * x.value * g)

    return _make(x.value * x.value, (x,), fn)


def absolute(x: Tensor) -> Tensor:
    def fn(g):
        x._accumulate(np.sign(x.value) * g)

    return _make(np.abs(x.value), (x,), fn)


def total(x: Tensor) -> Tensor:
    shape = x.value.shape

    def fn(g):
        x._accumulate(np.broadcast_to(g, shape))

    return _make(np.sum(x.value), (x,), fn)


def select(x: Tensor, mask: np.ndarray) -> Tensor:
    """Rows of ``x`` where ``mask`` is true."""
    shape = x.value.shape

    def fn(g):
        acc = np.zeros(shape)
        acc[mask] = g
        x._accumulate(acc)

    return _make(x.value[mask], (x,), fn)


def sum_all(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- MLPs --------------------------------------------------------------------------


@dataclass
class Mlp:
    """ReLU network; the activation follows every layer, including the last."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("an MLP needs one bias per weight matrix and at least one layer")
        self.weights = [np.asarray(W, dtype=np.float64) for W in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        for j, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or W.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {j}: weight {W.shape} and bias {b.shape} disagree")
            if j and W.shape[1] != self.weights[j - 1].shape[0]:
                raise ShapeError(f"layer {j}: input width {W.shape[1]} does not chain")

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> "Mlp":
        return cls(
            [np.zeros((dims[j + 1], dims[j])) for j in range(len(dims) - 1)],
            [np.zeros(dims[j + 1]) for j in range(len(dims) - 1)],
        )

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator) -> "Mlp":
        """Uniform in ``±1/sqrt(fan_in)`` for weights; zero biases."""
        weights = []
        for j in range(len(dims) - 1):
            bound = 1.0 / np.sqrt(dims[j])
            weights.append(rng.uniform(-bound, bound, size=(dims[j + 1], dims[j])))
        return cls(weights, [np.zeros(dims[j + 1]) for j in range(len(dims) - 1)])


def mlp_forward(f: Mlp, x) -> np.ndarray:
    """Evaluate ``f`` on a vector or on a batch of row vectors."""
    a = np.asarray(x, dtype=np.float64)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.shape[1] != f.in_dim:
        raise ShapeError(f"expected input width {f.in_dim}, got {a.shape[1]}")
    for W, b in zip(f.weights, f.biases):
        a = np.maximum(a @ W.T + b, 0.0)
    return a[0] if single else a


def mlp_apply(x: Tensor, layers: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Recorded version of :func:`mlp_forward` over leaf tensors."""
    for W, b in layers:
        x = relu(linear(x, W, b))
    return x


# -- AdamW -----------------------------------------------------------------------------


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamWState":
        return cls(
            m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw
        )


def adamw_step(
    state: AdamWState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]
) -> list[np.ndarray]:
    """One AdamW update; returns new parameter arrays and advances ``state`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient at optimizer step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ShapeError(f"shape mismatch at parameter {i}")
        m = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        state.m[i], state.v[i] = m, v
        p_new = p * (1.0 - state.lr * state.weight_decay)
        p_new = p_new - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out.append(p_new)
    return out


# -- checkpoints -----------------------------------------------------------------------


def layers_to_json(weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> list[dict]:
    return [{"W": W.tolist(), "b": b.tolist()} for W, b in zip(weights, biases)]


def layers_from_json(layers: Sequence[dict]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    ws, bs = [], []
    for layer in layers:
        W = np.asarray(layer["W"], dtype=np.float64)
        if W.ndim != 2:
            W = W.reshape(len(layer["b"]), -1)
        ws.append(W)
        bs.append(np.asarray(layer["b"], dtype=np.float64).reshape(-1))
    return ws, bs


def dumps_checkpoint(arch: dict, weights, biases) -> str:
    # json writes floats with repr, which round-trips float64 exactly
    return json.dumps({"arch": arch, "layers": layers_to_json(weights, biases)})
