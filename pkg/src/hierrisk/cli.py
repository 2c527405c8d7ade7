"""Command-line interface.

Exit codes: 0 success, 1 invalid input or configuration, 2 computation failure.
"""

from __future__ import annotations

import json
import logging
import sys
from functools import wraps
from pathlib import Path

import click
import pandas as pd

from .cox import FitConfig, RandomEffectSpec, fit_model
from .data import IntervalRules, build_at_risk_intervals, load_dataset, write_dataset
from .errors import (ConvergenceError, DegenerateTestError, NumericalError, SchemaError,
                     SelectionError, ValidationError)
from .imputation import fill_missing, load_mi_stack
from .pipeline import PipelineConfig, emit_report, run_pipeline, run_simulation_study
from .pooling import stepdown_select
from .predict import expected_by_program, training_hazard
from .simulate import SimConfig, gen_dataset, sim_diagnostics
from .data import observed_by_program

INPUT_ERRORS = (ValidationError, SchemaError, DegenerateTestError, FileNotFoundError,
                KeyError, json.JSONDecodeError, click.UsageError)
COMPUTE_ERRORS = (ConvergenceError, NumericalError, SelectionError, FloatingPointError,
                  RuntimeError, ArithmeticError)


class Failure(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _guard(fn):
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except INPUT_ERRORS as exc:
            raise Failure(1, f"invalid input: {exc}") from exc
        except COMPUTE_ERRORS as exc:
            raise Failure(2, f"computation failed: {exc}") from exc
        except ValueError as exc:
            raise Failure(1, f"invalid input: {exc}") from exc
    return wrapper


def _read_json(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _fit_config(cox_only, terms, robust, include_frailty=False) -> FitConfig:
    re = None if cox_only else RandomEffectSpec(tuple(terms.split(",")))
    return FitConfig(random_effects=re, robust_groups=robust,
                     include_frailty_in_prediction=include_frailty)


def _pipeline_config(config_path, overrides) -> PipelineConfig:
    d = _read_json(config_path)
    for k, v in overrides.items():
        if v is not None and v != ():
            d[k] = list(v) if isinstance(v, tuple) else v
    return PipelineConfig.from_dict(d)


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more log output.")
def cli(verbose):
    """Risk-adjusted expected event counts for programs with recurrent-event data."""
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="JSON file of generator settings.")
@click.option("--period", type=click.Choice(["three_year", "one_year"]))
@click.option("--n-level1", type=int)
@click.option("--n-level2", type=int)
@click.option("--seed", type=int)
@click.option("--out", type=click.Path(), required=True, help="Dataset CSV.")
@click.option("--truth", type=click.Path(), help="Latent values as JSON.")
@_guard
def simulate(config_path, period, n_level1, n_level2, seed, out, truth):
    """Generate one synthetic dataset."""
    d = _read_json(config_path)
    for k, v in (("period", period), ("n_level1", n_level1), ("n_level2", n_level2),
                 ("seed", seed)):
        if v is not None:
            d[k] = v
    data, tr = gen_dataset(SimConfig.from_dict(d))
    write_dataset(data, out)
    if truth:
        Path(truth).write_text(tr.to_json(indent=2))
    cens, second, total = sim_diagnostics(data, tr)
    click.echo(f"rows {data.n_rows}, events {total}, censoring rate {cens:.4f}, "
               f"second-event rate {second:.4f}")


@cli.command()
@click.argument("encounters", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), required=True)
@click.option("--washout-days", type=int, default=730, show_default=True)
@click.option("--lookback-days", type=int, default=730, show_default=True)
@click.option("--max-gap-days", type=int, default=548, show_default=True)
@click.option("--period-start", type=float)
@click.option("--period-end", type=float)
@click.option("--covariates", help="Comma-separated covariate columns.")
@click.option("--fill/--no-fill", default=False, help="Carry values forward and back.")
@click.option("--windowed", multiple=True, help="Column filled by trailing-window max.")
@click.option("--window-days", type=int, default=365, show_default=True)
@_guard
def ingest(encounters, out, washout_days, lookback_days, max_gap_days, period_start,
           period_end, covariates, fill, windowed, window_days):
    """Build at-risk intervals from dated encounter records."""
    enc = pd.read_csv(encounters, dtype={"level1": str, "level2": str})
    rules = IntervalRules(washout_days, lookback_days, max_gap_days)
    covs = covariates.split(",") if covariates else None
    data = build_at_risk_intervals(enc, rules, covs, period_start, period_end)
    if fill:
        data, report = fill_missing(data, windowed=windowed, window_days=window_days)
        for name in report.dropped:
            click.echo(f"dropped covariate {name}")
    write_dataset(data, out)
    click.echo(f"{data.n_rows} intervals, {data.n_level2} subjects, "
               f"{data.n_level1} programs, {data.n_events} events")


@cli.command()
@click.option("--pattern", required=True, help="Copy files, e.g. 'copy_{}.csv'.")
@click.option("--M", "M", type=int, required=True)
@click.option("--schema", type=click.Path(exists=True))
@click.option("--cox-only", is_flag=True)
@click.option("--terms", default="level1", show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Trace JSON.")
@click.option("--text", type=click.Path(), help="Readable trace.")
@_guard
def select(pattern, M, schema, cox_only, terms, out, text):
    """Step-down covariate selection over imputed copies."""
    stack = load_mi_stack(pattern, M, schema)
    try:
        trace = stepdown_select(stack, _fit_config(cox_only, terms, None))
    except SelectionError as exc:
        if exc.trace is not None:
            Path(out).write_text(exc.trace.to_json(indent=2))
        raise
    Path(out).write_text(trace.to_json(indent=2))
    if text:
        Path(text).write_text(trace.to_text())
    click.echo(trace.to_text(), nl=False)


@cli.command()
@click.argument("data_path", type=click.Path(exists=True))
@click.option("--schema", type=click.Path(exists=True))
@click.option("--cox-only", is_flag=True)
@click.option("--terms", default="level1", show_default=True)
@click.option("--robust", type=click.Choice(["level1", "level2"]))
@click.option("--out", type=click.Path(), required=True, help="Fit JSON.")
@_guard
def fit(data_path, schema, cox_only, terms, robust, out):
    """Fit the Cox or mixed-effect model."""
    data = load_dataset(data_path, schema)
    result = fit_model(data, _fit_config(cox_only, terms, robust))
    Path(out).write_text(result.to_json(indent=2))
    for name, b, se in zip(result.covariate_names, result.beta_hat, result.se):
        click.echo(f"{name:>20s} {b: .5f} ({se:.5f})")
    for term, th in result.theta_hat.items():
        click.echo(f"variance[{term}] {th:.6g}")


@cli.command()
@click.option("--train", "train_path", type=click.Path(exists=True), required=True)
@click.option("--eval", "eval_path", type=click.Path(exists=True))
@click.option("--schema", type=click.Path(exists=True))
@click.option("--cox-only", is_flag=True)
@click.option("--terms", default="level1", show_default=True)
@click.option("--include-frailty", is_flag=True)
@click.option("--out", type=click.Path(), required=True)
@_guard
def predict(train_path, eval_path, schema, cox_only, terms, include_frailty, out):
    """Expected and observed counts per program."""
    train = load_dataset(train_path, schema)
    ev = load_dataset(eval_path, schema) if eval_path else train
    cfg = _fit_config(cox_only, terms, None, include_frailty)
    result = fit_model(train, cfg)
    haz = training_hazard(result, train, include_frailty)
    expected = expected_by_program(result, haz, ev, include_frailty)
    frame = pd.DataFrame({"observed": observed_by_program(ev), "expected": expected})
    frame.reset_index().to_csv(out, index=False)
    click.echo(f"{len(frame)} programs; observed {int(frame.observed.sum())}, "
               f"expected {frame.expected.sum():.3f}")


def _pipeline_options(fn):
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True)),
        click.option("--output-dir"),
        click.option("--seed", type=int),
        click.option("--training"),
        click.option("--validation"),
        click.option("--M", "M", type=int),
        click.option("--m-blocks", type=int, multiple=True),
        click.option("--confidence", type=float, multiple=True),
        click.option("--estimator", type=click.Choice(["block_jackknife", "loo_jackknife"])),
        click.option("--normalization", type=click.Choice(["block_scaled", "classical"])),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


def _overrides(output_dir, seed, training, validation, M, m_blocks, confidence,
               estimator, normalization):
    return {"output_dir": output_dir, "seed": seed, "training": training,
            "validation": validation, "M": M, "m_blocks": m_blocks,
            "confidence_levels": confidence, "variance_estimator": estimator,
            "normalization": normalization}


@cli.command()
@_pipeline_options
@_guard
def validate(config_path, **kw):
    """Run the full pipeline and write predictions, coverage and diagnostics."""
    config = _pipeline_config(config_path, _overrides(**kw))
    files = run_pipeline(config)
    cov = pd.read_csv(files["coverage"])
    click.echo(cov.to_string(index=False))
    click.echo(f"artifacts in {config.output_dir}")


cli.add_command(validate, name="run")


@cli.command()
@click.argument("artifacts", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), help="Flag table CSV.")
@_guard
def report(artifacts, out):
    """Flag programs whose observed count falls outside the interval."""
    text, table = emit_report(artifacts)
    if out:
        table.to_csv(out, index=False)
    click.echo(text, nl=False)


@cli.command()
@_pipeline_options
@click.option("--replicates", type=int)
@_guard
def study(config_path, replicates, **kw):
    """Simulation study: mean coverage per training period, m and level."""
    overrides = _overrides(**kw)
    overrides["replicates"] = replicates
    config = _pipeline_config(config_path, overrides)
    report_ = run_simulation_study(config)
    click.echo(report_.summary.to_string(index=False))
    if report_.failures:
        click.echo(f"{len(report_.failures)} replicate(s) failed")


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="hierrisk", standalone_mode=False)
    except Failure as exc:
        click.echo(str(exc), err=True)
        return exc.code
    except click.exceptions.Abort:
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
