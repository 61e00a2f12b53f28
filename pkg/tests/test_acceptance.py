"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``CRITERION <n>: PASS|FAIL`` line (collected again in the
terminal summary) and then asserts the criterion at its stated tolerance.
Criteria 4, 5 and 8 train ten full-length models and take a while.
"""

import time

import numpy as np
import pytest

from minagg.certificate import (
    EvalSuite,
    audit_extrapolation,
    certify,
    check_simple_theorem,
    e_test,
)
from minagg.dataset import gen_er_family, gen_er_sparse, gen_experiment_train, gen_gk, gen_h_small, gen_test_suite
from minagg.graph import AttributedGraph, bf_k, default_beta
from minagg.model import (
    MinAggConfig,
    MinAggGnnParams,
    SimpleGnnParams,
    build_exact_bf,
    count_nonzero,
    forward_many,
    preset,
    prune_params,
    simple_forward,
)
from minagg.training import (
    EXPERIMENT_L1,
    EXPERIMENT_PRUNE,
    LossConfig,
    TrainBatch,
    default_eta,
    loss_reg,
    objective,
    train,
)

RESULTS: dict[int, str] = {}

SEEDS = range(5)
STEPS = 20000
EVAL_EVERY = 2000
TABLE_SIZES = (100, 500, 1000)
TABLE_GRAPHS = 20


def record(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)


# -- 1. oracle equivalence ------------------------------------------------------------------


def _er_small(count=100):
    return [gen_er_sparse(6 + s % 45, seed=s) for s in range(count)]


def test_criterion_1_exact_construction_matches_oracle():
    t0 = time.perf_counter()
    mixed = gen_test_suite(0)
    er = _er_small()
    mismatches = 0
    checked = 0
    for K in (1, 2, 3):
        for L in (K, K + 1):
            p = build_exact_bf(MinAggConfig.uniform(L, K, 2, d=3, width=2, hidden=3))
            graphs = [pair.input for pair in gen_gk(K).pairs] + mixed + er
            for g, h in zip(graphs, forward_many(p, graphs)):
                checked += 1
                mismatches += not np.array_equal(h, bf_k(g, K).features)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 10
    record(1, ok, f"{checked} graph checks, {mismatches} mismatches, {elapsed:.1f}s")
    assert ok


# -- 2. sparsity budget -----------------------------------------------------------------------


def test_criterion_2_sparsity_budget():
    t0 = time.perf_counter()
    ok = True
    parts = []
    for L, K, m in [(1, 1, 1), (2, 2, 2), (3, 2, 2)]:
        p = build_exact_bf(MinAggConfig.uniform(L, K, m, d=4, width=3, hidden=5))
        man = gen_gk(K)
        budget = m * L + m * K + K
        eta = default_eta(man.M, budget)
        nz = count_nonzero(p)
        reg = loss_reg(p, man, LossConfig(eta))
        ok &= nz == budget and reg == eta * budget
        parts.append(f"({L},{K},{m}) nonzero={nz}/{budget} loss_reg={reg:.6g}={budget}*eta")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 1
    record(2, ok, "; ".join(parts) + f"; {elapsed:.2f}s")
    assert ok


# -- 3. gradients ------------------------------------------------------------------------------


def _kink_free_params(config, seed):
    rng = np.random.default_rng(seed)
    p = MinAggGnnParams.init(config, seed)
    arrays = p.arrays()
    for a in arrays:
        if a.ndim == 1:
            a += rng.uniform(0.01, 0.1, size=a.shape) * rng.choice([-1, 1], size=a.shape)
    return p.with_arrays(arrays)


def test_criterion_3_gradients_match_finite_differences():
    t0 = time.perf_counter()
    config = MinAggConfig.uniform(2, 2, 2, d=3, width=2, hidden=3)
    tb = TrainBatch.build(gen_gk(2))
    h, lam = 1e-5, 0.1
    worst = 0.0
    for seed in range(20):
        p = _kink_free_params(config, seed)
        loss, _, _, leaves = objective(p, tb, lam)
        loss.backward()
        arrays = p.arrays()
        for i, a in enumerate(arrays):
            grad = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)
            for idx in np.ndindex(a.shape):
                old = a[idx]
                a[idx] = old + h
                up = float(objective(p.with_arrays(arrays), tb, lam)[0].value)
                a[idx] = old - h
                down = float(objective(p.with_arrays(arrays), tb, lam)[0].value)
                a[idx] = old
                fd = (up - down) / (2 * h)
                worst = max(worst, abs(grad[idx] - fd) / max(abs(fd), 1e-3))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 30
    record(3, ok, f"worst relative gap {worst:.2e} over 20 seeds, {elapsed:.1f}s")
    assert ok


# -- 4, 5, 8. training reproductions -----------------------------------------------------------------


class TrainedPair:
    def __init__(self, seed: int):
        self.seed = seed
        config = preset("paper-2layer")
        self.manifest = gen_experiment_train(2)
        self.suite = EvalSuite(gen_test_suite(0), 2)
        self.eta = default_eta(self.manifest.M, config.budget)
        init = MinAggGnnParams.init(config, seed)
        self.reg_raw, self.reg_trace = train(
            init, self.manifest, LossConfig(self.eta, EXPERIMENT_L1), steps=STEPS,
            eval_suite=self.suite, eval_every=EVAL_EVERY)
        self.plain_raw, self.plain_trace = train(
            init, self.manifest, LossConfig(self.eta, 0.0), steps=STEPS,
            eval_suite=self.suite, eval_every=EVAL_EVERY)
        self.reg = prune_params(self.reg_raw, EXPERIMENT_PRUNE)
        self.plain = prune_params(self.plain_raw, EXPERIMENT_PRUNE)
        self.reg_error = e_test(self.reg, self.suite)
        self.plain_error = e_test(self.plain, self.suite)
        self.reg_raw_error = float(self.reg_trace.column("e_test")[-1])
        self.plain_raw_error = float(self.plain_trace.column("e_test")[-1])

    @property
    def passes(self) -> bool:
        return self.reg_error <= 0.02 and self.plain_error >= 5 * self.reg_error


@pytest.fixture(scope="module")
def trained():
    return [TrainedPair(s) for s in SEEDS]


def test_criterion_4_regularized_training_generalizes(trained):
    lines = []
    for t in trained:
        lines.append(
            f"seed {t.seed}: L1 {t.reg_error:.4f} (raw {t.reg_raw_error:.4f}, "
            f"{count_nonzero(t.reg)} nonzero) vs plain {t.plain_error:.4f} (raw {t.plain_raw_error:.4f}) "
            f"-> {'ok' if t.passes else 'miss'}")
    passed = sum(t.passes for t in trained)
    ok = passed >= 3
    record(4, ok, f"{passed}/5 seeds pass; " + "; ".join(lines))
    assert ok


def _table_row(model, n):
    graphs = gen_er_family(n, TABLE_GRAPHS, seed=n)
    return e_test(model, EvalSuite(graphs, 2, 1)), e_test(model, EvalSuite(graphs, 2, 3))


def test_criterion_5_size_generalization_table(trained):
    t0 = time.perf_counter()
    per_seed = []
    for t in trained:
        rows = {n: _table_row(t.reg, n) for n in TABLE_SIZES}
        plain_single, plain_iter = _table_row(t.plain, 1000)
        reg_ok = all(s <= 0.01 and it <= 0.015 for s, it in rows.values())
        plain_ok = plain_iter >= 2 * plain_single
        per_seed.append((t.seed, reg_ok and plain_ok, rows, plain_single, plain_iter))
    elapsed = time.perf_counter() - t0
    passed = sum(ok for _, ok, *_ in per_seed)
    ok = passed >= 3
    detail = "; ".join(
        f"seed {s}: " + " ".join(f"n={n} {a:.4f}/{b:.4f}" for n, (a, b) in rows.items())
        + f" plain n=1000 {ps:.4f}/{pi:.4f} -> {'ok' if good else 'miss'}"
        for s, good, rows, ps, pi in per_seed)
    record(5, ok, f"{passed}/5 seeds pass (single/iterated), {elapsed:.0f}s; {detail}")
    assert ok


def test_criterion_8_training_is_bitwise_deterministic(trained):
    first = trained[0]
    init = MinAggGnnParams.init(preset("paper-2layer"), first.seed)
    _, again = train(init, first.manifest, LossConfig(first.eta, EXPERIMENT_L1), steps=STEPS,
                     eval_suite=first.suite, eval_every=EVAL_EVERY)
    ok = again.to_csv() == first.reg_trace.to_csv()
    record(8, ok, f"seed {first.seed}: {len(again)} rows, traces {'identical' if ok else 'differ'}")
    assert ok


# -- 6. certificate soundness ------------------------------------------------------------------------


def _audit_suites():
    suites = {"mixed": gen_test_suite(0)}
    for n in TABLE_SIZES:
        suites[f"er{n}"] = gen_er_family(n, 100 if n < 1000 else 34, seed=7 + n)
    return suites


def _perturbed_exact(config, rng):
    p = build_exact_bf(config)
    rel = 10 ** rng.uniform(-6, -3.7)
    arrays = p.arrays()
    for a in arrays:
        nz = a != 0
        a[nz] *= 1 + rng.uniform(-1, 1, size=int(nz.sum())) * rel
    return p.with_arrays(arrays)


def test_criterion_6_certificate_soundness(trained):
    t0 = time.perf_counter()
    suites = _audit_suites()
    rng = np.random.default_rng(6)
    configs = [MinAggConfig.uniform(2, 2, 2, d=2, width=2, hidden=2), preset("paper-2layer")]
    candidates = []
    for config in configs:
        candidates.append(("exact", config, build_exact_bf(config)))
        candidates += [("perturbed", config, _perturbed_exact(config, rng)) for _ in range(4)]
    candidates += [("trained", t.reg.config, t.reg) for t in trained]

    certified = failures = 0
    worst = 0.0
    for kind, config, p in candidates:
        man = gen_gk(2) if kind != "trained" else gen_experiment_train(2)
        cert = certify(p, man, LossConfig(default_eta(man.M, config.budget)))
        if not cert.hypothesis_ok:
            continue
        certified += 1
        for graphs in suites.values():
            report = audit_extrapolation(p, cert, graphs)
            failures += not report.passes(cert.appendix_factor)
            worst = max(worst, report.max_violation / max(cert.bound_factor, 1e-300))

    # a model scaled by 1 + 2 M eps against a certificate that promises M eps
    man = gen_gk(2)
    config = configs[0]
    cert = certify(_perturbed_exact(config, rng), man, LossConfig(default_eta(man.M, config.budget)))
    injected = 2 * cert.bound_factor
    outside = build_exact_bf(config)
    outside.up[-1].weights[-1][0, 0] *= 1 + injected
    report = audit_extrapolation(outside, cert, suites["er100"])
    caught = not report.passed and abs(report.max_violation - injected) <= 0.1 * injected
    elapsed = time.perf_counter() - t0
    ok = certified > 0 and failures == 0 and caught and elapsed < 120
    record(6, ok, f"{certified} certified models, {failures} audit failures at 2M eps "
                  f"(worst violation / M eps = {worst:.3f}); injected {injected:.3e} "
                  f"reported {report.max_violation:.3e}; {elapsed:.0f}s")
    assert ok


# -- 7. five-parameter model ----------------------------------------------------------------------


def _int_graphs(count=100, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        n = int(rng.integers(2, 30))
        src, dst = np.triu_indices(n, 1)
        keep = rng.random(len(src)) < 0.3
        w = rng.integers(0, 10, size=int(keep.sum())).astype(float)
        beta = default_beta(w)
        x = np.full(n, beta)
        x[0] = 0.0
        out.append(AttributedGraph(n, src[keep], dst[keep], w, x, beta, 0))
    return out


def test_criterion_7_simple_model_property_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    graphs = _int_graphs()
    truth = [bf_k(g, 1).features for g in graphs]
    small = gen_h_small()

    def exact_everywhere(p):
        train_err = max(float(np.max(np.abs(simple_forward(p, pair.input).features - pair.target.features)))
                        for pair in small.pairs)
        graph_err = max(float(np.max(np.abs(simple_forward(p, g).features - x))) for g, x in zip(graphs, truth))
        return train_err, graph_err

    # dyadic draws keep every product and sum exact, so "zero error" means bitwise zero
    draws = [SimpleGnnParams(1, 1, 0, 1, 0)]
    for _ in range(50):
        w2 = 2.0 ** int(rng.integers(-3, 4))
        b1 = float(rng.integers(0, 40)) / 8
        draws.append(SimpleGnnParams(1 / w2, 1 / w2, b1, w2, -w2 * b1))
    worst_exact = max(max(exact_everywhere(p)) for p in draws)

    envelope_bad = held = 0
    for eps in (0.2, 0.05, 0.01):
        for _ in range(20):
            base = draws[int(rng.integers(len(draws)))]
            d = rng.uniform(-1, 1, size=5) * eps / 400
            p = SimpleGnnParams(base.W11 * (1 + d[0]), base.W12 * (1 + d[1]), base.b1 + d[2],
                                base.w2 * (1 + d[3]), base.b2 + d[4])
            r = check_simple_theorem(p, eps, graphs)
            if r.hypothesis_ok:
                held += 1
                envelope_bad += not r.conclusion_ok
    elapsed = time.perf_counter() - t0
    ok = worst_exact == 0.0 and held > 0 and envelope_bad == 0 and elapsed < 30
    record(7, ok, f"51 exact draws worst error {worst_exact!r}; {held} perturbed draws within "
                  f"eps/20, {envelope_bad} outside the envelope; {elapsed:.1f}s")
    assert ok
