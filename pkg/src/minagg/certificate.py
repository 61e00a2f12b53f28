"""Test-error metric, loss-based certificates and the extrapolation audit.

A certificate records how far a model's L0-regularized training loss sits
above the minimum attained by the sparse exact construction. When that gap
``eps`` satisfies ``0 <= eps < eta < 1 / (2 M budget)``, every node output on
any graph should lie within a factor ``1 +- M eps`` of the K-step distance;
the audit checks this on concrete graphs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .dataset import DatasetManifest, gen_h_small, gk_members
from .graph import AttributedGraph, bf_k
from .model import (
    MinAggGnnParams,
    SimpleGnnParams,
    check_sparsity_structure,
    count_nonzero,
    forward_many,
    simple_forward,
)
from .training import LossConfig, eta_ceiling, loss_mae

ZERO_TOL = 1e-9


class CertificationRefused(ValueError):
    pass


class AuditRefused(ValueError):
    pass


# -- test error --------------------------------------------------------------------------


@dataclass
class EvalSuite:
    """Graphs with ground truth for ``K * reps`` BF steps precomputed."""

    graphs: list[AttributedGraph]
    K: int
    reps: int = 1
    truth: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.graphs:
            raise ValueError("evaluation suite is empty")
        if self.reps < 1 or self.K < 1:
            raise ValueError("K and reps must be positive")
        if not self.truth:
            self.truth = [bf_k(g, self.K * self.reps).features for g in self.graphs]


def node_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-node ``|1 - truth / pred|`` with the zero-prediction conventions."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    small = np.abs(pred) < ZERO_TOL
    safe = np.where(small, 1.0, pred)
    err = np.abs(1.0 - truth / safe)
    return np.where(small, np.where(np.abs(truth) < ZERO_TOL, 0.0, 1.0), err)


def e_test(params: MinAggGnnParams, suite, K: int | None = None, reps: int = 1) -> float:
    """Mean over graphs of the mean per-node multiplicative error.

    ``suite`` is an :class:`EvalSuite` or a list of graphs (then ``K`` is the
    model's unless given). The model is applied ``reps`` times in a row.
    """
    if not isinstance(suite, EvalSuite):
        suite = EvalSuite(list(suite), K or params.config.K, reps)
    preds = forward_many(params, suite.graphs, suite.reps)
    per_graph = [float(np.mean(node_errors(p, t))) for p, t in zip(preds, suite.truth)]
    return float(np.mean(per_graph))


# -- certificate ---------------------------------------------------------------------------


@dataclass
class Certificate:
    eta: float
    epsilon: float
    M: int
    param_budget: int
    loss_reg: float
    nonzero: int
    hypothesis_ok: bool
    structure_ok: bool
    bound_factor: float
    reasons: list[str] = field(default_factory=list)
    structure_violations: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.hypothesis_ok and not (
            self.epsilon < self.eta < eta_ceiling(self.M, self.param_budget)
        ):
            raise ValueError("a certificate with hypothesis_ok needs eps < eta < 1/(2 M budget)")

    @property
    def eta_ceiling(self) -> float:
        return eta_ceiling(self.M, self.param_budget)

    @property
    def appendix_factor(self) -> float:
        """The looser ``2 M eps`` constant from the parameter-level bounds."""
        return 2.0 * self.bound_factor

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eta_ceiling"] = self.eta_ceiling
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        d = {k: v for k, v in d.items() if k != "eta_ceiling"}
        return cls(**d)


def _missing_members(manifest: DatasetManifest) -> list[str]:
    K = manifest.k_steps
    inputs = manifest.inputs()
    labels = []
    for k in range(1, K + 1):
        for a in range(2 * K + 1):
            for b in (0, 2 * K + 1):
                labels.append(f"scale path k={k} a={a} b={b}")
    labels += ["unit path, step 0", "two-edge unit path, step 1", f"ladder gadget K={K}"]
    missing = []
    for g, label in zip(gk_members(K), labels):
        if not any(g.same_as(h) for h in inputs):
            missing.append(label)
    return missing


def certify(params: MinAggGnnParams, manifest: DatasetManifest, cfg: LossConfig) -> Certificate:
    """Measure the loss gap and decide whether the size-generalization hypothesis holds."""
    missing = _missing_members(manifest)
    if missing:
        raise CertificationRefused("training set lacks required graphs: " + ", ".join(missing))
    c = params.config
    budget = c.budget
    nonzero = count_nonzero(params, cfg.nonzero_threshold)
    reg = loss_mae(params, manifest) + cfg.eta * nonzero
    eps = reg - cfg.eta * budget
    ceiling = eta_ceiling(manifest.M, budget)
    reasons = []
    if eps < 0:
        reasons.append(f"loss gap {eps!r} is negative")
    if not eps < cfg.eta:
        reasons.append(f"loss gap {eps!r} is not below eta {cfg.eta!r}")
    if not cfg.eta < ceiling:
        reasons.append(f"eta {cfg.eta!r} is not below 1/(2 M budget) = {ceiling!r}")
    structure = check_sparsity_structure(params, cfg.nonzero_threshold)
    return Certificate(
        eta=cfg.eta, epsilon=eps, M=manifest.M, param_budget=budget, loss_reg=reg,
        nonzero=nonzero, hypothesis_ok=not reasons, structure_ok=structure.ok,
        bound_factor=manifest.M * eps, reasons=reasons,
        structure_violations=structure.violations,
    )


# -- audit -------------------------------------------------------------------------------------


@dataclass
class GraphAudit:
    index: int
    n: int
    max_violation: float
    worst_node: int
    worst_prediction: float
    worst_target: float


@dataclass
class AuditReport:
    """Worst relative deviation ``|h / x - 1|`` per graph.

    Nodes with target 0 must predict (numerically) 0; otherwise their deviation
    is reported as infinite.
    """

    bound_factor: float
    graphs: list[GraphAudit]
    rtol: float = 1e-12

    @property
    def max_violation(self) -> float:
        return max(g.max_violation for g in self.graphs)

    def passes(self, factor: float) -> bool:
        return all(g.max_violation <= factor * (1 + self.rtol) + self.rtol for g in self.graphs)

    @property
    def passed(self) -> bool:
        return self.passes(self.bound_factor)

    @property
    def passed_appendix(self) -> bool:
        return self.passes(2.0 * self.bound_factor)

    def failures(self, factor: float | None = None) -> list[GraphAudit]:
        f = self.bound_factor if factor is None else factor
        return [g for g in self.graphs if g.max_violation > f * (1 + self.rtol) + self.rtol]

    def to_dict(self) -> dict:
        return {
            "bound_factor": self.bound_factor,
            "max_violation": self.max_violation,
            "passed": self.passed,
            "passed_2x": self.passed_appendix,
            "graphs": [asdict(g) for g in self.graphs],
        }


def relative_violation(pred: np.ndarray, truth: np.ndarray, zero_tol: float = ZERO_TOL) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    pos = truth > 0
    out = np.where(np.abs(pred) <= zero_tol, 0.0, np.inf)
    return np.where(pos, np.abs(pred / np.where(pos, truth, 1.0) - 1.0), out)


def audit_extrapolation(
    params: MinAggGnnParams, cert: Certificate, suite: Sequence[AttributedGraph], K: int | None = None
) -> AuditReport:
    """Check ``(1 - M eps) x <= h <= (1 + M eps) x`` on every node of every graph."""
    if not cert.hypothesis_ok:
        raise AuditRefused("certificate hypothesis does not hold: " + "; ".join(cert.reasons))
    K = K or params.config.K
    graphs = list(suite)
    preds = forward_many(params, graphs)
    audits = []
    for i, (g, h) in enumerate(zip(graphs, preds)):
        x = bf_k(g, K).features
        v = relative_violation(h, x)
        j = int(np.argmax(v))
        audits.append(GraphAudit(i, g.n, float(v[j]), j, float(h[j]), float(x[j])))
    return AuditReport(cert.bound_factor, audits)


# -- five-parameter variant --------------------------------------------------------------------


@dataclass
class SimpleTheoremReport:
    epsilon: float
    train_error: float
    hypothesis_ok: bool
    slope_gap: float
    offset: float
    slope_ok: bool
    offset_ok: bool
    signs_ok: bool
    max_excess: float | None
    conclusion_ok: bool | None

    def to_dict(self) -> dict:
        return asdict(self)


def check_simple_theorem(
    params: SimpleGnnParams, epsilon: float, suite: Sequence[AttributedGraph]
) -> SimpleTheoremReport:
    """Check the small-set error hypothesis, then the ``(1 +- eps) x +- eps`` envelope.

    The envelope is only evaluated when the hypothesis holds.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    err = 0.0
    for pair in gen_h_small().pairs:
        h = simple_forward(params, pair.input).features
        err = max(err, float(np.max(np.abs(h - pair.target.features))))
    ok = err < epsilon / 20
    slope_gap = abs(params.w2 * params.W11 - 1) + abs(params.w2 * params.W12 - 1)
    offset = params.w2 * params.b1 + params.b2
    signs = params.w2 >= 0 and params.W11 >= 0 and params.W12 >= 0
    excess = conclusion = None
    if ok:
        excess = 0.0
        for g in suite:
            h = simple_forward(params, g).features
            x = bf_k(g, 1).features
            lo = (1 - epsilon) * x - epsilon
            hi = (1 + epsilon) * x + epsilon
            excess = max(excess, float(np.max(np.maximum(lo - h, h - hi))))
        conclusion = excess <= 0
    return SimpleTheoremReport(
        epsilon, err, ok, slope_gap, offset, slope_gap < epsilon,
        abs(offset) < 20 * epsilon, signs, excess, conclusion,
    )
