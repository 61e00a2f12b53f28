"""Command-line entry point: ``minagg <command> [options]``.

Every artifact-producing command writes into one run directory (``--out``,
default ``$MINAGG_OUT/<command-specific name>``, with ``MINAGG_OUT``
defaulting to ``runs``) and drops the fully resolved options there as
``config.json``. Options can also come from a JSON file passed with
``--config``; flags given on the command line win over file values.

Exit codes: 2 usage, 3 unreadable input, 4 config or architecture mismatch,
5 invalid graph data, 6 refusal (certificate, audit or oracle), 7 training
divergence.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import click
from click.core import ParameterSource

from . import dataset
from .certificate import (
    AuditRefused,
    CertificationRefused,
    EvalSuite,
    audit_extrapolation,
    certify,
    e_test,
)
from .graph import GraphValidationError, OracleTooLargeError, bf_k, brute_force_khop, dumps_graphs, loads_graphs
from .model import (
    PRESETS,
    ConfigError,
    MinAggConfig,
    MinAggGnnParams,
    build_exact_bf,
    count_nonzero,
    preset,
    prune_params,
)
from .training import (
    EXPERIMENT_L1,
    EXPERIMENT_PRUNE,
    LossConfig,
    OptimizerSettings,
    TrainingDiverged,
    TrainTrace,
    default_eta,
    smooth_trace,
    train,
)

EXIT_UNREADABLE = 3
EXIT_CONFIG = 4
EXIT_INVALID = 5
EXIT_REFUSED = 6
EXIT_DIVERGED = 7


class CliFailure(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


_ERROR_CODES = [
    (TrainingDiverged, EXIT_DIVERGED),
    ((CertificationRefused, AuditRefused, OracleTooLargeError), EXIT_REFUSED),
    (GraphValidationError, EXIT_INVALID),
    (ConfigError, EXIT_CONFIG),
    ((OSError, json.JSONDecodeError, UnicodeDecodeError), EXIT_UNREADABLE),
]


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.ClickException:
            raise
        except Exception as exc:
            for kinds, code in _ERROR_CODES:
                if isinstance(exc, kinds):
                    raise CliFailure(f"{type(exc).__name__}: {exc}", code) from exc
            raise


# -- shared plumbing ---------------------------------------------------------------------


def _config_option(f):
    return click.option(
        "--config", "config_file", type=click.Path(dir_okay=False),
        help="JSON file of option values; explicit flags override it.",
    )(f)


def _resolve(ctx: click.Context, opts: dict) -> dict:
    """Merge ``--config`` file values under any flags the user typed."""
    opts = dict(opts)
    path = opts.pop("config_file", None)
    if path is None:
        return opts
    data = json.loads(_read(path))
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(data) - set(opts))
    if unknown:
        raise ConfigError(f"{path}: unknown options {unknown}")
    for key, value in data.items():
        if ctx.get_parameter_source(key) in (ParameterSource.DEFAULT, None):
            opts[key] = value
    return opts


def _read(path) -> str:
    return Path(path).read_text(encoding="utf-8")


def _run_dir(out: str | None, default_name: str) -> Path:
    root = Path(out) if out else Path(os.environ.get("MINAGG_OUT", "runs")) / default_name
    root.mkdir(parents=True, exist_ok=True)
    return root


def _write(path: Path, text: str) -> None:
    path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")


def _write_config(run: Path, command: str, opts: dict) -> None:
    _write(run / "config.json", json.dumps({"command": command, **opts}, indent=2, sort_keys=True))


def _load_model(path: str) -> MinAggGnnParams:
    return MinAggGnnParams.from_json(_read(path))


def _load_manifest(path: str) -> dataset.DatasetManifest:
    return dataset.DatasetManifest.from_json(_read(path))


def _suite_graphs(suite_file, er_n, er_count, seed):
    if suite_file and er_n:
        raise click.UsageError("give either --suite or --er-n, not both")
    if suite_file:
        return loads_graphs(_read(suite_file))
    if er_n:
        return dataset.gen_er_family(er_n, er_count, seed)
    return dataset.gen_test_suite(seed)


@click.group(cls=_Group)
def main():
    """Train and certify min-aggregation GNNs on Bellman-Ford steps."""


# -- generation -------------------------------------------------------------------------------


@main.command("gen-train")
@click.option("--set", "which", type=click.Choice(["h-small", "gk", "experiment"]), default="experiment",
              show_default=True)
@click.option("--K", "k", type=int, default=2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False))
@_config_option
@click.pass_context
def gen_train(ctx, **opts):
    """Write a training manifest."""
    o = _resolve(ctx, opts)
    if o["which"] == "h-small":
        m = dataset.gen_h_small()
    elif o["which"] == "gk":
        m = dataset.gen_gk(o["k"])
    else:
        m = dataset.gen_experiment_train(o["k"], o["seed"])
    run = _run_dir(o.pop("out"), f"train-set-{o['which']}-K{o['k']}-seed{o['seed']}")
    _write(run / "manifest.json", m.to_json())
    _write_config(run, "gen-train", o)
    click.echo(f"{m.name}: {len(m.pairs)} pairs, M={m.M} -> {run / 'manifest.json'}")


@main.command("gen-test")
@click.option("--kind", type=click.Choice(["mixed", "er"]), default="mixed", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--per-family", type=int, default=50, show_default=True)
@click.option("--n", "n", type=int, default=100, show_default=True, help="ER graph size.")
@click.option("--count", type=int, default=100, show_default=True, help="Number of ER graphs.")
@click.option("--out", type=click.Path(file_okay=False))
@_config_option
@click.pass_context
def gen_test(ctx, **opts):
    """Write an evaluation suite (mixed families or sparse ER)."""
    o = _resolve(ctx, opts)
    if o["kind"] == "mixed":
        graphs = dataset.gen_test_suite(o["seed"], o["per_family"])
        name = f"suite-mixed-seed{o['seed']}"
    else:
        graphs = dataset.gen_er_family(o["n"], o["count"], o["seed"])
        name = f"suite-er{o['n']}-seed{o['seed']}"
    run = _run_dir(o.pop("out"), name)
    _write(run / "suite.json", dumps_graphs(graphs))
    _write_config(run, "gen-test", o)
    click.echo(f"{len(graphs)} graphs -> {run / 'suite.json'}")


# -- training -----------------------------------------------------------------------------------


@main.command("train")
@click.option("--preset", "preset_name", type=click.Choice(sorted(PRESETS)), default="paper-2layer",
              show_default=True)
@click.option("--l1", type=float, default=EXPERIMENT_L1, show_default=True, help="L1 coefficient; 0 trains plain MSE.")
@click.option("--eta", type=float, default=None, help="L0 coefficient for the reported regularized loss.")
@click.option("--seed", type=int, default=0, show_default=True, help="Initialization seed.")
@click.option("--steps", type=int, default=20000, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--manifest", type=click.Path(dir_okay=False), help="Training manifest; default is the experiment set.")
@click.option("--data-seed", type=int, default=0, show_default=True, help="Seed of the default experiment set.")
@click.option("--eval-every", type=int, default=500, show_default=True)
@click.option("--summary-every", type=int, default=100, show_default=True)
@click.option("--checkpoint-every", type=int, default=0, show_default=True)
@click.option("--prune", type=float, default=EXPERIMENT_PRUNE, show_default=True,
              help="Also save a copy with parameters below this magnitude zeroed; 0 disables.")
@click.option("--out", type=click.Path(file_okay=False))
@_config_option
@click.pass_context
def train_cmd(ctx, **opts):
    """Train a MinAgg GNN; writes trace.csv, model.json and a summary."""
    o = _resolve(ctx, opts)
    config = preset(o["preset_name"])
    if o["manifest"]:
        manifest = _load_manifest(o["manifest"])
    else:
        manifest = dataset.gen_experiment_train(config.K, o["data_seed"])
    eta = o["eta"] if o["eta"] is not None else default_eta(manifest.M, config.budget)
    o["eta"] = eta
    cfg = LossConfig(eta, o["l1"])
    run = _run_dir(o.pop("out"), f"train-{o['preset_name']}-l1_{o['l1']}-seed{o['seed']}")
    _write_config(run, "train", o)

    def save_checkpoint(step, params):
        (run / "checkpoints").mkdir(exist_ok=True)
        _write(run / "checkpoints" / f"step{step:07d}.json", params.to_json())

    suite = EvalSuite(dataset.gen_test_suite(0), config.K)
    params, trace = train(
        MinAggGnnParams.init(config, o["seed"]), manifest, cfg,
        OptimizerSettings(lr=o["lr"]), o["steps"], suite, o["eval_every"], o["summary_every"],
        o["checkpoint_every"], save_checkpoint,
    )
    _write(run / "trace.csv", trace.to_csv())
    _write(run / "model.json", params.to_json())
    summary = {"final_e_test": e_test(params, suite), "nonzero": count_nonzero(params, cfg.nonzero_threshold)}
    if o["prune"] > 0:
        pruned = prune_params(params, o["prune"])
        _write(run / "model_pruned.json", pruned.to_json())
        summary["pruned_e_test"] = e_test(pruned, suite)
        summary["pruned_nonzero"] = count_nonzero(pruned)
    _write(run / "summary.json", json.dumps(summary, indent=2, sort_keys=True))
    click.echo(json.dumps(summary, sort_keys=True))


# -- evaluation and certificates -----------------------------------------------------------------


@main.command("eval")
@click.option("--model", required=True, type=click.Path(dir_okay=False))
@click.option("--suite", "suite_file", type=click.Path(dir_okay=False), help="Graph list JSON.")
@click.option("--er-n", type=int, default=None, help="Evaluate on sparse ER graphs of this size.")
@click.option("--er-count", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--reps", type=int, default=1, show_default=True, help="Apply the model this many times in a row.")
@_config_option
@click.pass_context
def eval_cmd(ctx, **opts):
    """Print the mean multiplicative test error of a checkpoint."""
    o = _resolve(ctx, opts)
    params = _load_model(o["model"])
    graphs = _suite_graphs(o["suite_file"], o["er_n"], o["er_count"], o["seed"])
    value = e_test(params, EvalSuite(graphs, params.config.K, o["reps"]))
    click.echo(json.dumps({"e_test": value, "graphs": len(graphs), "reps": o["reps"]}))


@main.command("certify")
@click.option("--model", required=True, type=click.Path(dir_okay=False))
@click.option("--manifest", type=click.Path(dir_okay=False), help="Training manifest; default is the K-step set.")
@click.option("--eta", type=float, default=None, help="L0 coefficient; default 0.9 of the admissible ceiling.")
@click.option("--audit-er-n", type=int, multiple=True, default=(100,), show_default=True)
@click.option("--audit-count", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False))
@_config_option
@click.pass_context
def certify_cmd(ctx, **opts):
    """Certify a model against its regularized loss and audit the envelope."""
    o = _resolve(ctx, opts)
    o["audit_er_n"] = list(o["audit_er_n"])
    params = _load_model(o["model"])
    manifest = _load_manifest(o["manifest"]) if o["manifest"] else dataset.gen_gk(params.config.K)
    eta = o["eta"] if o["eta"] is not None else default_eta(manifest.M, params.config.budget)
    o["eta"] = eta
    cert = certify(params, manifest, LossConfig(eta))
    run = _run_dir(o.pop("out"), f"certify-{Path(o['model']).stem}")
    _write_config(run, "certify", o)
    _write(run / "certificate.json", cert.to_json())
    click.echo(f"eps={cert.epsilon!r} eta={cert.eta!r} ceiling={cert.eta_ceiling!r}")
    click.echo(f"nonzero={cert.nonzero} budget={cert.param_budget} structure_ok={cert.structure_ok}")
    if not cert.hypothesis_ok:
        for r in cert.reasons:
            click.echo(f"  {r}")
        raise CliFailure("hypothesis does not hold; no extrapolation guarantee", EXIT_REFUSED)
    graphs = dataset.gen_test_suite(o["seed"])
    for n in o["audit_er_n"]:
        graphs += dataset.gen_er_family(n, o["audit_count"], o["seed"])
    report = audit_extrapolation(params, cert, graphs)
    _write(run / "audit.json", json.dumps(report.to_dict(), indent=2))
    click.echo(f"bound M*eps={cert.bound_factor!r} max violation={report.max_violation!r}")
    click.echo(f"audit (1 +- M eps): {'PASS' if report.passed else 'FAIL'}; "
               f"(1 +- 2M eps): {'PASS' if report.passed_appendix else 'FAIL'}")


@main.command("exact-bf")
@click.option("--L", "L", type=int, default=2, show_default=True)
@click.option("--K", "K", type=int, default=2, show_default=True)
@click.option("--m", "m", type=int, default=1, show_default=True)
@click.option("--d", "d", type=int, default=1, show_default=True)
@click.option("--width", type=int, default=1, show_default=True, help="Node-feature width between layers.")
@click.option("--hidden", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False))
@_config_option
@click.pass_context
def exact_bf(ctx, **opts):
    """Materialize the sparse weights that compute K Bellman-Ford steps."""
    o = _resolve(ctx, opts)
    config = MinAggConfig.uniform(o["L"], o["K"], o["m"], o["d"], o["width"], o["hidden"])
    params = build_exact_bf(config)
    run = _run_dir(o.pop("out"), f"exact-L{o['L']}-K{o['K']}-m{o['m']}")
    _write(run / "model.json", params.to_json())
    _write_config(run, "exact-bf", o)
    click.echo(f"{count_nonzero(params)} nonzero parameters -> {run / 'model.json'}")


# -- export and oracle ------------------------------------------------------------------------------


@main.command("export")
@click.option("--trace", "trace_file", required=True, type=click.Path(dir_okay=False))
@click.option("--sigma", type=float, default=20.0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="Output CSV; default next to the trace.")
@_config_option
@click.pass_context
def export(ctx, **opts):
    """Gaussian-smooth every column of a trace CSV for plotting."""
    o = _resolve(ctx, opts)
    trace = TrainTrace.from_csv(_read(o["trace_file"]))
    smoothed = TrainTrace(trace.summary_names)
    columns = {name: smooth_trace(trace.column(name), o["sigma"]) for name in trace.header()[1:]}
    metrics = [columns[n] for n in trace.header()[1:5]]
    summaries = [columns[n] for n in trace.summary_names]
    for i, step in enumerate(trace.steps):
        summ = [c[i] for c in summaries] if summaries else None
        smoothed.append(step, [m[i] for m in metrics], summ)
    out = Path(o["out"]) if o["out"] else Path(o["trace_file"]).with_name("trace_smoothed.csv")
    _write(out, smoothed.to_csv())
    click.echo(f"{len(trace)} rows -> {out}")


@main.command("oracle")
@click.option("--graph", "graph_file", required=True, type=click.Path(dir_okay=False))
@click.option("--k", "k", type=int, default=1, show_default=True)
@click.option("--brute-force", is_flag=True, help="Enumerate walks instead of relaxing (small graphs only).")
def oracle(graph_file, k, brute_force):
    """Print K-step shortest-path features for each graph in a file."""
    for g in loads_graphs(_read(graph_file)):
        x = brute_force_khop(g, k) if brute_force else bf_k(g, k).features
        click.echo(json.dumps([float(v) for v in x]))
