"""Pooling across imputed copies and step-down covariate selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .cox import FitConfig, fit_model
from .errors import ConvergenceError, NumericalError, SelectionError, ValidationError
from .imputation import MIStack
from .variance import ordered_map


@dataclass(frozen=True)
class PooledEstimate:
    """Rubin's-rule combination of per-copy coefficient estimates."""

    names: tuple
    beta_bar: np.ndarray
    total_var: np.ndarray
    within: np.ndarray
    between: np.ndarray
    t_stats: np.ndarray
    p_values: np.ndarray
    df: np.ndarray

    def to_dict(self):
        return {"names": list(self.names), "beta_bar": self.beta_bar.tolist(),
                "se": np.sqrt(np.diag(self.total_var)).tolist(),
                "t": self.t_stats.tolist(), "p": self.p_values.tolist(),
                "df": [None if not np.isfinite(d) else float(d) for d in self.df]}


def rubin_pool(betas, covs, names=None) -> PooledEstimate:
    """Pool ``M`` coefficient vectors and covariance matrices.

    ``Var = W + (1 + 1/M) B`` with ``W`` the mean within-copy covariance and
    ``B`` the between-copy covariance (divisor ``M - 1``). Each coordinate
    gets the Rubin degrees of freedom
    ``(M - 1) (1 + W_kk / ((1 + 1/M) B_kk))^2``, infinite (normal reference)
    when ``B_kk = 0``.
    """
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    M, p = betas.shape
    covs = np.asarray(covs, dtype=float).reshape(M, p, p)
    if M < 2:
        raise ValueError("pooling needs at least two copies")
    same = np.ptp(betas, axis=0) == 0
    beta_bar = np.where(same, betas[0], betas.mean(axis=0))  # exact for equal copies
    W = covs.mean(axis=0)
    dev = np.where(same, 0.0, betas - beta_bar)
    B = dev.T @ dev / (M - 1)
    total = W + (1 + 1 / M) * B
    se = np.sqrt(np.diag(total))
    t = beta_bar / se
    b = np.diag(B)
    w = np.diag(W)
    with np.errstate(divide="ignore"):
        df = np.where(b > 0, (M - 1) * (1 + w / np.where(b > 0, (1 + 1 / M) * b, 1.0)) ** 2,
                      np.inf)
    finite = np.isfinite(df)
    p_values = np.where(finite, 2 * stats.t.sf(np.abs(t), np.where(finite, df, 1.0)),
                        2 * stats.norm.sf(np.abs(t)))
    names = tuple(names) if names is not None else tuple(f"x{k}" for k in range(p))
    return PooledEstimate(names, beta_bar, total, W, B, t, p_values, df)


class _CopyFit:
    def __init__(self, config):
        self.config = config

    def __call__(self, copy):
        fit = fit_model(copy, self.config)
        return fit.beta_hat, fit.beta_cov


def pooled_fit(stack: MIStack, config: FitConfig | None = None) -> PooledEstimate:
    """Fit every copy (Cox start, then the configured model) and pool."""
    results = ordered_map(_CopyFit(config or FitConfig()), stack.copies)
    return rubin_pool([r[0] for r in results], [r[1] for r in results],
                      stack.covariate_names)


@dataclass
class SelectionTrace:
    """Record of a step-down selection run."""

    initial: list
    iterations: list = field(default_factory=list)  # dicts: dropped, p_values, rule
    final_covariates: list = field(default_factory=list)
    final_estimate: PooledEstimate | None = None
    notes: list = field(default_factory=lambda: [
        "columns are tested one at a time; dummy columns of one factor are not grouped"])

    @property
    def dropped(self) -> list:
        return [n for it in self.iterations for n in it["dropped"]]

    def to_dict(self):
        return {"initial": list(self.initial), "iterations": self.iterations,
                "final_covariates": list(self.final_covariates),
                "final_estimate": None if self.final_estimate is None
                else self.final_estimate.to_dict(),
                "notes": self.notes}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def to_text(self) -> str:
        lines = [f"start: {len(self.initial)} covariates"]
        for k, it in enumerate(self.iterations, start=1):
            if it["rule"] == "stop":
                lines.append(f"step {k}: stop (max p = {it['max_p']:.4g})")
            else:
                dropped = ", ".join(f"{n} (p={p:.4g})"
                                    for n, p in zip(it["dropped"], it["p_values"]))
                lines.append(f"step {k}: {it['rule']} -> {dropped}")
        lines.append(f"final: {len(self.final_covariates)} covariates: "
                     + ", ".join(self.final_covariates))
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines) + "\n"


def stepdown_rule(p_values: dict, thresholds=(0.5, 0.25, 0.1)):
    """Which covariates to drop in one step.

    Returns ``(rule, names)``. Names are ordered by decreasing p-value with
    ties broken by name.
    """
    hi, mid, lo = thresholds
    order = sorted(p_values, key=lambda n: (-p_values[n], n))
    pmax = p_values[order[0]]
    if pmax >= hi:
        return "drop3", [n for n in order if p_values[n] >= hi][:3]
    if pmax > mid:
        return "drop2", [n for n in order if p_values[n] > mid][:2]
    if pmax >= lo:
        return "drop1", order[:1]
    return "stop", []


def stepdown_select(stack: MIStack, config: FitConfig | None = None,
                    thresholds=(0.5, 0.25, 0.1)) -> SelectionTrace:
    """Backward elimination on pooled p-values, dropping up to three per step.

    Each step fits every imputed copy, pools by Rubin's rules and applies
    :func:`stepdown_rule`. Selection stops when the largest pooled p-value
    is below the last threshold; the trace keeps the pooled fit on the
    surviving covariates.
    """
    if stack.M < 2:
        raise ValueError("selection needs at least two imputed copies")
    names = list(stack.covariate_names)
    if not names:
        raise ValueError("no covariates to select from")
    trace = SelectionTrace(initial=list(names))
    while names:
        try:
            pooled = pooled_fit(stack.select_covariates(names), config)
        except (ConvergenceError, NumericalError, ValidationError) as exc:
            trace.final_covariates = list(names)
            raise SelectionError(f"fit failed with {len(names)} covariates: {exc}",
                                 trace) from exc
        pv = dict(zip(names, map(float, pooled.p_values)))
        rule, drop = stepdown_rule(pv, thresholds)
        if rule == "stop":
            trace.iterations.append({"rule": "stop", "dropped": [], "p_values": [],
                                     "max_p": max(pv.values())})
            trace.final_estimate = pooled
            break
        trace.iterations.append({"rule": rule, "dropped": drop,
                                 "p_values": [pv[n] for n in drop],
                                 "max_p": max(pv.values())})
        names = [n for n in names if n not in drop]
    trace.final_covariates = names
    return trace
