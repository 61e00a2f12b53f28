"""Losses over labeled pairs, the full-batch training loop and its trace."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .dataset import DatasetManifest
from .graph import reachable_mask
from .model import ConfigError, GraphBatch, MinAggGnnParams, count_nonzero, forward_tensor, summary_fields


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass(frozen=True)
class LossConfig:
    eta: float
    lambda_l1: float = 1.0
    nonzero_threshold: float = 1e-6

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.lambda_l1 < 0 or self.nonzero_threshold < 0:
            raise ValueError("lambda_l1 and nonzero_threshold must be non-negative")

    def to_dict(self) -> dict:
        return {"eta": self.eta, "lambda_l1": self.lambda_l1,
                "nonzero_threshold": self.nonzero_threshold}


# L1 coefficient and post-training magnitude cut used for the size-generalization
# experiment. Adam keeps every L1-penalized weight oscillating at roughly the
# learning rate, so weights below ``EXPERIMENT_PRUNE`` are optimizer noise.
EXPERIMENT_L1 = 0.01
EXPERIMENT_PRUNE = 1e-3


def eta_ceiling(M: int, budget: int) -> float:
    """Largest admissible L0 coefficient, ``1 / (2 M budget)`` (exclusive)."""
    return 1.0 / (2.0 * M * budget)


def default_eta(M: int, budget: int) -> float:
    return 0.9 * eta_ceiling(M, budget)


@dataclass
class TrainBatch:
    """A manifest packed for full-batch evaluation."""

    batch: GraphBatch
    target: np.ndarray
    mask: np.ndarray
    M: int
    K: int

    @classmethod
    def build(cls, manifest: DatasetManifest) -> "TrainBatch":
        if not manifest.pairs:
            raise ValueError("manifest has no pairs")
        inputs = [p.input for p in manifest.pairs]
        target = np.concatenate([p.target.features for p in manifest.pairs])
        mask = np.concatenate([reachable_mask(p.target) for p in manifest.pairs])
        return cls(GraphBatch.build(inputs), target, mask, manifest.M, manifest.k_steps)


def _prepare(params: MinAggGnnParams, data) -> TrainBatch:
    tb = data if isinstance(data, TrainBatch) else TrainBatch.build(data)
    if tb.K != params.config.K:
        raise ConfigError(f"manifest encodes K={tb.K} steps but the model has K={params.config.K}")
    if tb.M == 0:
        raise ValueError("manifest has no reachable nodes")
    return tb


def _errors(params: MinAggGnnParams, tb: TrainBatch) -> np.ndarray:
    pred = forward_tensor(params, tb.batch).value[:, 0]
    return (tb.target - pred)[tb.mask]


def loss_mae(params: MinAggGnnParams, manifest) -> float:
    """Absolute error summed over nodes reached in the targets, divided by ``M``."""
    tb = _prepare(params, manifest)
    return float(np.sum(np.abs(_errors(params, tb))) / tb.M)


def loss_mse(params: MinAggGnnParams, manifest) -> float:
    tb = _prepare(params, manifest)
    return float(np.sum(_errors(params, tb) ** 2) / tb.M)


def loss_reg(params: MinAggGnnParams, manifest, cfg: LossConfig) -> float:
    """``loss_mae + eta * (number of parameters above the threshold)``."""
    return loss_mae(params, manifest) + cfg.eta * count_nonzero(params, cfg.nonzero_threshold)


def loss_mse_l1(params: MinAggGnnParams, manifest, cfg: LossConfig) -> float:
    tb = _prepare(params, manifest)
    l1 = sum(float(np.abs(a).sum()) for a in params.arrays())
    return loss_mse(params, tb) + cfg.lambda_l1 * l1


def objective(params: MinAggGnnParams, tb: TrainBatch, lambda_l1: float):
    """Recorded ``mse + lambda * l1``; returns (loss tensor, mse, errors, leaves)."""
    leaves = [nn.leaf(a) for a in params.arrays()]
    pred = forward_tensor(params, tb.batch, leaves)
    err = nn.sub(nn.constant(tb.target[tb.mask].reshape(-1, 1)), nn.select(pred, tb.mask))
    mse = nn.scale(nn.total(nn.square(err)), 1.0 / tb.M)
    loss = mse
    if lambda_l1 != 0:
        l1 = nn.sum_all([nn.total(nn.absolute(t)) for t in leaves])
        loss = nn.add(mse, nn.scale(l1, lambda_l1))
    return loss, float(mse.value), err.value[:, 0], leaves


def gradients(params: MinAggGnnParams, manifest, lambda_l1: float) -> tuple[float, list[np.ndarray]]:
    tb = _prepare(params, manifest)
    loss, _, _, leaves = objective(params, tb, lambda_l1)
    loss.backward()
    return float(loss.value), [t.grad if t.grad is not None else np.zeros_like(t.value) for t in leaves]


# -- trace ---------------------------------------------------------------------------

METRIC_COLUMNS = ("loss_mse", "loss_mse_l1", "loss_reg", "e_test")


@dataclass
class TrainTrace:
    """One record per optimizer step, taken with the parameters before the update.

    ``e_test`` and the parameter summaries are only filled on their strides;
    elsewhere they hold NaN.
    """

    summary_names: list[str]
    steps: list[int] = field(default_factory=list)
    metrics: list[list[float]] = field(default_factory=list)
    summaries: list[np.ndarray | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def column(self, name: str) -> np.ndarray:
        if name in METRIC_COLUMNS:
            i = METRIC_COLUMNS.index(name)
            return np.array([row[i] for row in self.metrics])
        j = self.summary_names.index(name)
        return np.array([np.nan if s is None else s[j] for s in self.summaries])

    def append(self, step: int, metrics: Sequence[float], summary: np.ndarray | None) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError("trace steps must increase")
        self.steps.append(step)
        self.metrics.append(list(metrics))
        self.summaries.append(summary)

    def header(self) -> list[str]:
        return ["step", *METRIC_COLUMNS, *self.summary_names]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        blank = [""] * len(self.summary_names)
        for step, row, summ in zip(self.steps, self.metrics, self.summaries):
            cells = [str(step)] + [_fmt(v) for v in row]
            cells += blank if summ is None else [_fmt(v) for v in summ]
            w.writerow(cells)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainTrace":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][: 1 + len(METRIC_COLUMNS)] != ["step", *METRIC_COLUMNS]:
            raise ValueError("not a trace CSV")
        names = rows[0][1 + len(METRIC_COLUMNS):]
        trace = cls(names)
        k = 1 + len(METRIC_COLUMNS)
        for r in rows[1:]:
            summ = None if all(c == "" for c in r[k:]) else np.array([_parse(c) for c in r[k:]])
            trace.append(int(r[0]), [_parse(c) for c in r[1:k]], summ)
        return trace


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def _parse(c: str) -> float:
    return float("nan") if c == "" else float(c)


# -- the loop -------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerSettings:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def to_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "weight_decay": self.weight_decay}


def train(
    params: MinAggGnnParams,
    manifest: DatasetManifest,
    cfg: LossConfig,
    optimizer: OptimizerSettings = OptimizerSettings(),
    steps: int = 20000,
    eval_suite=None,
    eval_every: int = 500,
    summary_every: int = 100,
    checkpoint_every: int = 0,
    on_checkpoint=None,
) -> tuple[MinAggGnnParams, TrainTrace]:
    """Full-batch AdamW on ``mse + lambda * l1`` (plain MSE when lambda is 0).

    ``eval_suite`` is an :class:`~minagg.certificate.EvalSuite`; its error is
    recorded every ``eval_every`` steps and on the final step.
    """
    from .certificate import e_test

    tb = _prepare(params, manifest)
    names, _ = summary_fields(params)
    trace = TrainTrace(names)
    arrays = [a.copy() for a in params.arrays()]
    state = nn.AdamWState.for_params(arrays, **optimizer.to_dict())
    current = params
    for step in range(steps):
        current = params.with_arrays(arrays)
        loss, mse, err, leaves = objective(current, tb, cfg.lambda_l1)
        total_loss = float(loss.value)
        if not math.isfinite(total_loss):
            raise TrainingDiverged(step, "loss")
        loss.backward()
        grads = [t.grad if t.grad is not None else np.zeros_like(t.value) for t in leaves]
        mae = float(np.sum(np.abs(err)) / tb.M)
        reg = mae + cfg.eta * count_nonzero(current, cfg.nonzero_threshold)
        et = float("nan")
        last = step == steps - 1
        if eval_suite is not None and (step % eval_every == 0 or last):
            et = e_test(current, eval_suite)
        summ = summary_fields(current)[1] if (step % summary_every == 0 or last) else None
        trace.append(step, [mse, total_loss, reg, et], summ)
        try:
            arrays = nn.adamw_step(state, arrays, grads)
        except nn.NonFiniteError:
            raise TrainingDiverged(step, "gradient") from None
        if checkpoint_every and on_checkpoint is not None and (step + 1) % checkpoint_every == 0:
            on_checkpoint(step + 1, params.with_arrays(arrays))
    return params.with_arrays(arrays), trace


def smooth_trace(values: Sequence[float], sigma: float) -> list[float]:
    """Gaussian smoothing truncated at 3 sigma, renormalized near the ends.

    NaN entries are dropped before smoothing and stay NaN in the output, so a
    sparsely sampled column is smoothed over its own samples.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x = np.asarray(values, dtype=np.float64)
    if sigma < 0.25 or x.size == 0:
        return x.tolist()
    ok = ~np.isnan(x)
    y = x[ok]
    radius = int(math.ceil(3 * sigma))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    out = x.copy()
    out[ok] = _centered_conv(y, k) / _centered_conv(np.ones_like(y), k)
    return out.tolist()


def _centered_conv(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = (k.size - 1) // 2
    return np.convolve(x, k, mode="full")[r : r + x.size]
