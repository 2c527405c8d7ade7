"""End-to-end runs: data, selection, fits, expected counts, variance, coverage, reports."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from . import __version__
from .cox import FitConfig, fit_model
from .data import Dataset, load_dataset, observed_by_program, write_dataset
from .errors import ConvergenceError, NumericalError, ValidationError
from .imputation import MIStack, assemble_mi_stack, load_mi_stack
from .pooling import stepdown_select
from .predict import (expected_by_program, flag_for, predict_programs, predictions_frame,
                      training_hazard)
from .simulate import SimConfig, gen_dataset
from .variance import (THREADS_ENV, block_jackknife_variance, block_partition, mi_variance,
                       confidence_interval, leave_block_estimates, jackknife_spread,
                       loo_jackknife_variance, ordered_map)

logger = logging.getLogger(__name__)

ESTIMATORS = ("block_jackknife", "loo_jackknife")


def substream_seed(master: int, *keys) -> int:
    """Deterministic child seed for a named substream of the master seed."""
    words = [int(master) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(str(k).encode()))
    return int(np.random.SeedSequence(words).generate_state(1, np.uint32)[0])


@dataclass
class PipelineConfig:
    """Settings for :func:`run_pipeline` and :func:`run_simulation_study`.

    In ``analyze`` mode ``training`` and ``validation`` are CSV paths; with
    ``M > 1`` they are patterns formatted with the copy index ``1..M``. In
    ``simulate`` mode they are dictionaries of :class:`SimConfig` fields.
    A missing ``validation`` means the training data are also evaluated.
    """

    mode: str = "simulate"
    training: object = None
    validation: object = None
    schema: object = None
    M: int = 1
    m_blocks: list = field(default_factory=lambda: [5, 10, 15])
    confidence_levels: list = field(default_factory=lambda: [0.7, 0.8, 0.9, 0.95, 0.995])
    variance_estimator: str = "block_jackknife"
    normalization: str = "block_scaled"
    selection: bool = False
    selection_thresholds: list = field(default_factory=lambda: [0.5, 0.25, 0.1])
    seed: int = 0
    output_dir: str = "out"
    fit: dict = field(default_factory=dict)
    upper_share: float = 0.5
    validation_cutoff_day: float | None = None
    report_confidence: float = 0.9
    histogram_bins: int = 20
    replicates: int = 1
    study_periods: list = field(default_factory=lambda: ["one_year", "three_year"])
    validation_period: str = "one_year"
    extra_normalizations: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in ("simulate", "analyze"):
            raise ValidationError(f"mode must be simulate or analyze, got {self.mode!r}")
        if self.mode == "analyze" and not self.training:
            raise ValidationError("analyze mode needs a training path")
        if int(self.M) < 1:
            raise ValidationError("M must be at least 1")
        for c in self.confidence_levels:
            if not 0 < float(c) < 1:
                raise ValidationError(f"confidence level {c} outside (0, 1)")
        if not self.confidence_levels:
            raise ValidationError("no confidence levels")
        if self.variance_estimator not in ESTIMATORS:
            raise ValidationError(f"variance_estimator must be one of {ESTIMATORS}")
        for norm in [self.normalization] + list(self.extra_normalizations):
            if norm not in ("block_scaled", "classical"):
                raise ValidationError("normalization must be block_scaled or classical")
        if self.variance_estimator == "block_jackknife":
            if not self.m_blocks or any(int(m) < 2 for m in self.m_blocks):
                raise ValidationError("m_blocks must be integers >= 2")
        if not 0 <= float(self.upper_share) <= 1:
            raise ValidationError("upper_share must lie in [0, 1]")
        if self.selection and int(self.M) < 2:
            raise ValidationError("selection needs M >= 2 imputed copies")
        if int(self.replicates) < 1:
            raise ValidationError("replicates must be positive")
        for p in list(self.study_periods) + [self.validation_period]:
            if p not in ("one_year", "three_year"):
                raise ValidationError(f"unknown period {p!r}")
        try:
            self.fit_config()
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"bad fit settings: {exc}") from exc

    def fit_config(self) -> FitConfig:
        return FitConfig.from_dict(self.fit) if self.fit else FitConfig()

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


# -- data stage --------------------------------------------------------------------

def _load_stack(spec, M, schema) -> MIStack:
    spec = str(spec)
    if M == 1 and "{" not in spec:
        return assemble_mi_stack([load_dataset(spec, schema)])
    return load_mi_stack(spec, M, schema)


def _restrict_programs(stack: MIStack, programs) -> MIStack:
    programs = set(map(str, programs))
    extra = sorted(set(stack[0].level1_labels) - programs)
    if not extra:
        return stack
    logger.warning("dropping %d validation programs absent from training", len(extra))
    return MIStack(tuple(c.drop_level1(extra) for c in stack.copies))


def prepare_data(config: PipelineConfig):
    """Training and validation stacks plus the seeds used to make them."""
    seeds = {}
    if config.mode == "simulate":
        train_cfg = dict(config.training or {})
        train_cfg.setdefault("period", config.validation_period)
        seeds["simulation_train"] = substream_seed(config.seed, "simulation", "train")
        train, truth = gen_dataset(SimConfig.from_dict({**train_cfg,
                                                        "seed": seeds["simulation_train"]}))
        if config.validation is False:
            valid = None
        else:
            val_cfg = dict(config.validation or {})
            for k in ("n_level1", "n_level2"):
                if k in train_cfg:
                    val_cfg.setdefault(k, train_cfg[k])
            val_cfg.setdefault("period", config.validation_period)
            val_cfg.setdefault("subject_prefix", "V")
            seeds["simulation_validation"] = substream_seed(config.seed, "simulation",
                                                            "validation")
            valid, _ = gen_dataset(SimConfig.from_dict(
                {**val_cfg, "seed": seeds["simulation_validation"]}),
                program_effects=truth.program_effects)
        train_stack = assemble_mi_stack([train])
        valid_stack = None if valid is None else assemble_mi_stack([valid])
    else:
        train_stack = _load_stack(config.training, config.M, config.schema)
        valid_stack = (None if not config.validation
                       else _load_stack(config.validation, config.M, config.schema))
    if valid_stack is None:
        valid_stack = train_stack
    else:
        if valid_stack.M != train_stack.M:
            raise ValidationError("training and validation need the same number of copies")
        valid_stack = _restrict_programs(valid_stack, train_stack[0].level1_labels)
    if config.validation_cutoff_day is not None:
        valid_stack = MIStack(tuple(c.truncate(config.validation_cutoff_day)
                                    for c in valid_stack.copies))
    return train_stack, valid_stack, seeds


# -- analysis ----------------------------------------------------------------------

def _weighted_covariates(data: Dataset) -> pd.DataFrame:
    w = data.stop - data.start
    codes = data.level1_codes
    denom = np.bincount(codes, weights=w, minlength=data.n_level1)
    cols = {name: np.bincount(codes, weights=w * data.covariates[:, k],
                              minlength=data.n_level1) / denom
            for k, name in enumerate(data.covariate_names)}
    return pd.DataFrame(cols, index=pd.Index(data.level1_labels, name="level1"))


def analyze(train: MIStack, valid: MIStack, config: PipelineConfig, seeds: dict):
    """Fits, expected counts, variance components and coverage for one data pair."""
    fit_cfg = config.fit_config()
    fits, expected = [], []
    for l, (tr, ev) in enumerate(zip(train.copies, valid.copies), start=1):
        fit = fit_model(tr, fit_cfg)
        haz = training_hazard(fit, tr, fit_cfg.include_frailty_in_prediction)
        fits.append(fit)
        expected.append(expected_by_program(fit, haz, ev,
                                            fit_cfg.include_frailty_in_prediction))
    per_copy = pd.concat(expected, axis=1, keys=range(1, train.M + 1))
    observed = observed_by_program(valid[0]).reindex(per_copy.index)

    across, plans = {}, {}
    if config.variance_estimator == "block_jackknife":
        programs = train[0].level1_labels
        for m in config.m_blocks:
            m = int(m)
            seeds[f"blocks_m{m}"] = substream_seed(config.seed, "blocks", m)
            plan = block_partition(programs, m, seeds[f"blocks_m{m}"])
            plans[m] = plan
            per = [block_jackknife_variance(tr, fit_cfg, plan, ev, config.normalization,
                                            init=f.beta_hat)
                   for tr, ev, f in zip(train.copies, valid.copies, fits)]
            across[m] = pd.concat(per, axis=1).mean(axis=1)
    else:
        per = [loo_jackknife_variance(tr, fit_cfg, ev, init=f.beta_hat)
               for tr, ev, f in zip(train.copies, valid.copies, fits)]
        across["loo"] = pd.concat(per, axis=1).mean(axis=1)

    preds, cov_rows = {}, []
    for m, acr in across.items():
        for conf in config.confidence_levels:
            pr = predict_programs(observed, per_copy, acr, float(conf), config.upper_share)
            preds[(m, float(conf))] = pr
            cov = float(np.mean([p.ci_lo <= p.observed <= p.ci_hi for p in pr]))
            cov_rows.append({"m": m, "confidence": float(conf), "coverage": cov,
                             "abs_cov_diff": abs(cov - float(conf))})
    return {"fits": fits, "per_copy": per_copy, "observed": observed,
            "across": across, "plans": plans, "predictions": preds,
            "coverage": pd.DataFrame(cov_rows)}


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_pipeline(config: PipelineConfig) -> dict:
    """Run every stage and write the artifacts to ``config.output_dir``.

    Returns a dict of artifact paths. On failure a ``failure.json`` record is
    written next to whatever artifacts were already produced and the error
    is re-raised.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = "data"
    files = {}
    try:
        train, valid, seeds = prepare_data(config)
        if config.mode == "simulate":
            for name, stack in (("training", train), ("validation", valid)):
                p = out / f"{name}.csv"
                write_dataset(stack[0], p)
                files[f"{name}_data"] = p
        if config.selection:
            stage = "selection"
            trace = stepdown_select(train, config.fit_config(),
                                    tuple(config.selection_thresholds))
            _write_json(out / "selection_trace.json", trace.to_dict())
            (out / "selection_trace.txt").write_text(trace.to_text())
            files["selection_trace"] = out / "selection_trace.json"
            if not trace.final_covariates:
                raise ValidationError("selection dropped every covariate")
            train = train.select_covariates(trace.final_covariates)
            valid = valid.select_covariates(trace.final_covariates)
        stage = "analysis"
        res = analyze(train, valid, config, seeds)
        stage = "output"
        files.update(_write_outputs(out, config, res, valid))
        manifest = {
            "package_version": __version__,
            "config_hash": config.hash(),
            "config": config.to_dict(),
            "master_seed": config.seed,
            "seeds": seeds,
            "files": {k: {"path": Path(v).name, "sha256": _sha256(v)}
                      for k, v in sorted(files.items())},
        }
        _write_json(out / "manifest.json", manifest)
        files["manifest"] = out / "manifest.json"
        return files
    except Exception as exc:
        _write_json(out / "failure.json", {"stage": stage, "error": type(exc).__name__,
                                           "message": str(exc)})
        raise


def _report_key(config, res):
    keys = list(res["predictions"])
    conf = float(config.report_confidence)
    for k in keys:
        if abs(k[1] - conf) < 1e-12:
            return k
    return keys[0]


def _write_outputs(out: Path, config, res, valid: MIStack) -> dict:
    files = {}
    key = _report_key(config, res)
    frame = predictions_frame(res["predictions"][key])
    frame.insert(1, "m", key[0])
    frame.to_csv(out / "predictions.csv", index=False)
    _write_json(out / "predictions.json", frame.to_dict("records"))
    files["predictions"] = out / "predictions.csv"

    long = []
    for (m, conf), pr in res["predictions"].items():
        f = predictions_frame(pr)
        f.insert(1, "m", m)
        long.append(f)
    pd.concat(long).to_csv(out / "predictions_all.csv", index=False)
    files["predictions_all"] = out / "predictions_all.csv"

    res["coverage"].to_csv(out / "coverage.csv", index=False)
    files["coverage"] = out / "coverage.csv"

    pooled = res["per_copy"].mean(axis=1)
    observed = res["observed"]
    edges = np.histogram_bin_edges(np.r_[pooled.to_numpy(), observed.to_numpy(float)],
                                   bins=int(config.histogram_bins))
    hist = pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:],
                         "expected_count": np.histogram(pooled, edges)[0],
                         "observed_count": np.histogram(observed, edges)[0]})
    hist.to_csv(out / "histogram.csv", index=False)
    files["histogram"] = out / "histogram.csv"

    rho = stats.spearmanr(pooled, observed).statistic if len(pooled) > 2 else float("nan")
    _write_json(out / "spearman.json", {"spearman": None if np.isnan(rho) else float(rho),
                                        "n_programs": int(len(pooled))})
    files["spearman"] = out / "spearman.json"

    weighted = sum(_weighted_covariates(c) for c in valid.copies) / valid.M
    resid = pd.DataFrame({"observed": observed, "expected": pooled,
                          "residual": observed - pooled}).join(weighted)
    resid.reset_index().to_csv(out / "residuals.csv", index=False)
    files["residuals"] = out / "residuals.csv"

    var_rows = []
    for m, acr in res["across"].items():
        mi = mi_variance(res["per_copy"].to_numpy())
        for j, a, s in zip(res["per_copy"].index, acr.reindex(res["per_copy"].index), mi):
            var_rows.append({"m": m, "level1": j, "poisson": pooled[j], "across_group": a,
                             "mi": s, "total": pooled[j] + a + s})
    pd.DataFrame(var_rows).to_csv(out / "variance.csv", index=False)
    files["variance"] = out / "variance.csv"

    _write_json(out / "fits.json", [f.to_dict() for f in res["fits"]])
    files["fits"] = out / "fits.json"
    if res["plans"]:
        _write_json(out / "block_plans.json", {str(m): p.to_dict()
                                               for m, p in res["plans"].items()})
        files["block_plans"] = out / "block_plans.json"
    return files


# -- simulation study ----------------------------------------------------------------

def _study_sim(config: PipelineConfig, period, seed, prefix, program_effects):
    base = dict(config.training or {})
    base.pop("period", None)
    base.pop("seed", None)
    return gen_dataset(SimConfig.from_dict({**base, "period": period, "seed": seed,
                                            "subject_prefix": prefix}),
                       program_effects=program_effects)


def _program_effects(config: PipelineConfig, seed):
    cfg = SimConfig.from_dict({**{k: v for k, v in (config.training or {}).items()
                                  if k not in ("period", "seed")}, "seed": seed})
    rng = np.random.default_rng(seed)
    var = abs(rng.normal(0.0, np.sqrt(cfg.re_variance_scale)))
    width = max(3, len(str(cfg.n_level1)))
    labels = [f"P{j + 1:0{width}d}" for j in range(cfg.n_level1)]
    return pd.Series(rng.normal(0.0, np.sqrt(var), cfg.n_level1), index=labels)


class _Replicate:
    def __init__(self, config):
        self.config = config

    def __call__(self, r):
        os.environ[THREADS_ENV] = "1"
        try:
            return run_replicate(self.config, r)
        except (ConvergenceError, NumericalError, ValidationError, ValueError) as exc:
            logger.warning("replicate %d failed: %s", r, exc)
            return {"replicate": r, "error": f"{type(exc).__name__}: {exc}"}


def run_replicate(config: PipelineConfig, r: int) -> dict:
    """One simulation replicate: every training period, same-period and next-period coverage."""
    fit_cfg = config.fit_config()
    rep_seed = substream_seed(config.seed, "replicate", r)
    effects = _program_effects(config, substream_seed(rep_seed, "programs"))
    valid, _ = _study_sim(config, config.validation_period,
                          substream_seed(rep_seed, "validation"), "V", effects)
    rows, coefs = [], []
    for period in config.study_periods:
        train, _ = _study_sim(config, period, substream_seed(rep_seed, "train", period),
                              "S", effects)
        ev_next = valid.subset_level1(train.level1_labels)
        cox = fit_model(train, replace(fit_cfg, random_effects=None))
        fit = fit_model(train, fit_cfg, init=cox.beta_hat) \
            if fit_cfg.random_effects is not None else cox
        coefs.append({"replicate": r, "period": period, "model": "cox",
                      **dict(zip(train.covariate_names, cox.beta_hat))})
        coefs.append({"replicate": r, "period": period, "model": "frailty",
                      "theta": next(iter(fit.theta_hat.values()), 0.0),
                      **dict(zip(train.covariate_names, fit.beta_hat))})
        haz = training_hazard(fit, train, fit_cfg.include_frailty_in_prediction)
        evals = {"same": train, "next": ev_next}
        expected = {k: expected_by_program(fit, haz, d, fit_cfg.include_frailty_in_prediction)
                    for k, d in evals.items()}
        observed = {k: observed_by_program(d).reindex(expected[k].index)
                    for k, d in evals.items()}
        for m in config.m_blocks:
            m = int(m)
            plan = block_partition(train.level1_labels, m,
                                   substream_seed(rep_seed, "blocks", period, m))
            frames = leave_block_estimates(train, fit_cfg, plan, list(evals.values()),
                                           init=fit.beta_hat)
            norms = [config.normalization] + [n for n in config.extra_normalizations
                                              if n != config.normalization]
            for (k, d), frame in zip(evals.items(), frames):
                exp_ = expected[k].to_numpy()
                obs = observed[k].to_numpy(float)
                for norm in norms:
                    total = exp_ + jackknife_spread(frame.to_numpy(), plan.q, norm)
                    for conf in config.confidence_levels:
                        lo, hi = confidence_interval(exp_, total, 1 - float(conf),
                                                     upper_share=config.upper_share)
                        cov = float(np.mean((lo <= obs) & (obs <= hi)))
                        rows.append({"replicate": r, "period": period, "validation": k,
                                     "normalization": norm, "m": m,
                                     "confidence": float(conf), "coverage": cov})
    return {"replicate": r, "coverage": rows, "coefficients": coefs}


@dataclass
class StudyReport:
    """Aggregated simulation-study results."""

    summary: pd.DataFrame
    coverage: pd.DataFrame
    coefficients: pd.DataFrame
    coefficient_means: pd.DataFrame
    failures: list

    @property
    def failure_rate(self) -> float:
        n = self.coverage["replicate"].nunique() + len(self.failures) if len(self.coverage) \
            else len(self.failures)
        return len(self.failures) / n if n else 0.0


def run_simulation_study(config: PipelineConfig, replicates: int | None = None,
                         write: bool = True) -> StudyReport:
    """Replicate the simulation design and tabulate mean coverage per setting.

    ``summary`` holds one row per (training period, validation set, m,
    confidence) with ``meanCoverage`` and ``AbsCovDiff`` (absolute difference
    between mean coverage and the nominal level).
    """
    if config.mode != "simulate":
        raise ValidationError("a simulation study needs simulate mode")
    replicates = int(replicates or config.replicates)
    results = ordered_map(_Replicate(config), range(replicates))
    failures = [r for r in results if "error" in r]
    good = [r for r in results if "error" not in r]
    if failures and len(failures) / replicates > 0.05:
        logger.warning("%d of %d replicates failed", len(failures), replicates)
    cov = pd.DataFrame([row for r in good for row in r["coverage"]])
    coefs = pd.DataFrame([row for r in good for row in r["coefficients"]])
    keys = ["period", "validation", "normalization", "m", "confidence"]
    if len(cov):
        summary = cov.groupby(keys, sort=True)["coverage"].agg(
            meanCoverage="mean", sdCoverage="std", replicates="count").reset_index()
        summary["AbsCovDiff"] = (summary["meanCoverage"] - summary["confidence"]).abs()
        coef_means = coefs.drop(columns="replicate").groupby(["period", "model"]).mean()
    else:
        summary = pd.DataFrame(columns=keys + ["meanCoverage", "AbsCovDiff"])
        coef_means = pd.DataFrame()
    report = StudyReport(summary, cov, coefs, coef_means, failures)
    if write:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary.to_csv(out / "study_summary.csv", index=False)
        cov.to_csv(out / "study_coverage.csv", index=False)
        coefs.to_csv(out / "study_coefficients.csv", index=False)
        coef_means.reset_index().to_csv(out / "study_coefficient_means.csv", index=False)
        files = ["study_summary.csv", "study_coverage.csv", "study_coefficients.csv",
                 "study_coefficient_means.csv"]
        _write_json(out / "study_failures.json", {
            "failures": failures, "failure_rate": report.failure_rate,
            "flagged": report.failure_rate > 0.05})
        files.append("study_failures.json")
        _write_json(out / "manifest.json", {
            "package_version": __version__, "config_hash": config.hash(),
            "config": config.to_dict(), "master_seed": config.seed,
            "replicates": replicates,
            "replicate_seeds": [substream_seed(config.seed, "replicate", r)
                                for r in range(replicates)],
            "files": {f: _sha256(out / f) for f in files}})
    return report


# -- report --------------------------------------------------------------------------

def emit_report(artifacts) -> tuple[str, pd.DataFrame]:
    """Flag table and a short text summary from a predictions table.

    ``artifacts`` is an output directory, a predictions CSV path or a frame
    with ``level1``, ``observed``, ``expected_pooled``, ``ci_lo``, ``ci_hi``.
    Flags use closed intervals: an observed count equal to a bound is
    ``within``.
    """
    if isinstance(artifacts, pd.DataFrame):
        frame = artifacts
    else:
        path = Path(artifacts)
        if path.is_dir():
            path = path / "predictions.csv"
        frame = pd.read_csv(path, dtype={"level1": str})
    table = frame[["level1", "observed", "expected_pooled", "ci_lo", "ci_hi"]].copy()
    table["flag"] = [flag_for(o, lo, hi) for o, lo, hi in
                     zip(table["observed"], table["ci_lo"], table["ci_hi"])]
    counts = table["flag"].value_counts().reindex(["below", "within", "above"], fill_value=0)
    level = frame["level"].iloc[0] if "level" in frame and len(frame) else None
    lines = [f"programs: {len(table)}"]
    if level is not None:
        lines.append(f"interval level: {level:g}")
    lines += [f"{k}: {v}" for k, v in counts.items()]
    flagged = table[table["flag"] != "within"]
    for row in flagged.itertuples(index=False):
        lines.append(f"  {row.level1}: observed {row.observed}, expected "
                     f"{row.expected_pooled:.2f}, interval [{row.ci_lo:.2f}, {row.ci_hi:.2f}]"
                     f" -> {row.flag}")
    return "\n".join(lines) + "\n", table
