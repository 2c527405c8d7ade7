"""Variance components of expected counts, Z-test, intervals and coverage."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .cox import FitConfig, fit_model
from .data import Dataset
from .errors import ConvergenceError, DegenerateTestError, NumericalError
from .predict import expected_by_program, training_hazard

logger = logging.getLogger(__name__)

THREADS_ENV = "HIERRISK_THREADS"


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def ordered_map(fn, items):
    """``list(map(fn, items))``, spread over processes when the thread variable asks for it.

    Results keep input order, so reductions are identical for any worker count.
    """
    items = list(items)
    n = min(_workers(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# -- block plan ------------------------------------------------------------------

@dataclass(frozen=True)
class BlockPlan:
    """Random sample of ``m * q`` programs split into ``m`` disjoint blocks of ``q``."""

    m: int
    q: int
    sampled_level1_ids: tuple
    blocks: tuple
    seed: int
    excluded: tuple = ()

    @property
    def N(self) -> int:
        return len(self.sampled_level1_ids) + len(self.excluded)

    def to_dict(self):
        return {"m": self.m, "q": self.q, "seed": self.seed,
                "sampled_level1_ids": [str(x) for x in self.sampled_level1_ids],
                "blocks": [[str(x) for x in b] for b in self.blocks],
                "excluded": [str(x) for x in self.excluded]}


def block_partition(ids, m: int, seed: int) -> BlockPlan:
    """Sample ``m * q`` program ids without replacement and cut them into ``m`` blocks.

    Parameters
    ----------
    ids : int or sequence
        Either the number of programs ``N`` (ids ``0..N-1``) or the ids themselves.
    m : int
        Number of blocks, ``2 <= m <= N``.
    seed : int

    Notes
    -----
    ``q`` is the largest integer with ``m * q <= N``, i.e. ``N // m``. Blocks
    are consecutive runs of the sampled order.
    """
    ids = np.arange(ids) if np.isscalar(ids) else np.asarray(list(ids))
    N = len(ids)
    if m > N:
        raise ValueError(f"m={m} blocks exceed N={N} programs")
    if m < 2:
        raise ValueError("need at least two blocks")
    q = N // m
    rng = np.random.default_rng(seed)
    pick = rng.choice(N, size=m * q, replace=False)
    sampled = ids[pick]
    rest = np.setdiff1d(np.arange(N), pick)
    blocks = tuple(tuple(sampled[b * q:(b + 1) * q].tolist()) for b in range(m))
    return BlockPlan(m, q, tuple(sampled.tolist()), blocks, seed,
                     tuple(ids[rest].tolist()))


def jackknife_spread(estimates: np.ndarray, q: int,
                     normalization: str = "block_scaled") -> np.ndarray:
    """Spread of leave-block estimates (programs x blocks) as a variance.

    ``"block_scaled"`` gives ``(m - 1) q sum_b (theta_b - theta_bar)^2``;
    ``"classical"`` gives the delete-a-block jackknife ``(m - 1)/m sum_b (...)^2``.
    """
    est = np.asarray(estimates, float)
    m = est.shape[-1]
    ss = np.sum((est - est.mean(axis=-1, keepdims=True)) ** 2, axis=-1)
    if normalization == "block_scaled":
        return (m - 1) * q * ss
    if normalization == "classical":
        return (m - 1) / m * ss
    raise ValueError(f"unknown normalization {normalization!r}")


class _Refit:
    """Picklable leave-out refit evaluated on fixed evaluation sets."""

    def __init__(self, data, config, evaluations, init, label):
        self.data, self.config, self.evaluations = data, config, evaluations
        self.init, self.label = init, label

    def __call__(self, drop):
        train = self.data.drop_level1(drop)
        try:
            fit = fit_model(train, self.config, self.init)
            haz = training_hazard(fit, train, self.config.include_frailty_in_prediction)
        except (ConvergenceError, NumericalError) as exc:
            raise ConvergenceError(f"{self.label} {drop!r}: refit failed: {exc}") from exc
        return [expected_by_program(fit, haz, ev, self.config.include_frailty_in_prediction,
                                    check_programs=False).to_numpy()
                for ev in self.evaluations]


def leave_block_estimates(data: Dataset, config: FitConfig, plan: BlockPlan,
                          evaluations: Sequence[Dataset], init=None) -> list[pd.DataFrame]:
    """Expected counts from each leave-block refit.

    Returns one (programs x blocks) frame per evaluation set.
    """
    sampled = data.subset_level1(plan.sampled_level1_ids)
    refit = _Refit(sampled, config, list(evaluations), init, "block")
    drops = [list(map(str, b)) for b in plan.blocks]
    try:
        results = ordered_map(refit, drops)
    except ConvergenceError as exc:
        raise ConvergenceError(f"leave-block refit failed: {exc}") from exc
    out = []
    for e, ev in enumerate(evaluations):
        mat = np.column_stack([r[e] for r in results])
        out.append(pd.DataFrame(mat, index=pd.Index(ev.level1_labels, name="level1"),
                                columns=range(1, plan.m + 1)))
    return out


def block_jackknife_variance(data: Dataset, config: FitConfig, plan: BlockPlan,
                             evaluation=None, normalization: str = "block_scaled", init=None):
    """Across-program variance of expected counts by the block jackknife.

    Parameters
    ----------
    data : Dataset
        One imputed copy of the training data.
    config : FitConfig
    plan : BlockPlan
        Built over the program ids of ``data``.
    evaluation : Dataset or list of Dataset, optional
        Data on which expected counts are evaluated (default ``data``). Every
        program of the evaluation data receives ``m`` leave-block estimates.
    normalization : {"block_scaled", "classical"}
    init : array_like, optional
        Warm-start coefficients for the refits.

    Returns
    -------
    Series, or list of Series when ``evaluation`` is a list.
    """
    single = not isinstance(evaluation, (list, tuple))
    evals = [data if evaluation is None else evaluation] if single else list(evaluation)
    frames = leave_block_estimates(data, config, plan, evals, init)
    out = [pd.Series(jackknife_spread(f.to_numpy(), plan.q, normalization), index=f.index)
           for f in frames]
    return out[0] if single else out


def loo_jackknife_variance(data: Dataset, config: FitConfig, evaluation=None, init=None):
    """Leave-one-program-out jackknife: ``(N - 1) sum_v (N_hat^(-v) - N_hat)^2``.

    ``N_hat`` is the estimate from the fit on all of ``data``.
    """
    if data.n_level1 < 2:
        raise ValueError("need at least two programs")
    single = not isinstance(evaluation, (list, tuple))
    evals = [data if evaluation is None else evaluation] if single else list(evaluation)
    full = _Refit(data, config, evals, init, "full")([])
    refit = _Refit(data, config, evals, init, "program")
    results = ordered_map(refit, [[v] for v in data.level1_labels])
    N = data.n_level1
    out = []
    for e, ev in enumerate(evals):
        dev = np.column_stack([r[e] for r in results]) - full[e][:, None]
        out.append(pd.Series((N - 1) * np.sum(dev ** 2, axis=1),
                             index=pd.Index(ev.level1_labels, name="level1")))
    return out[0] if single else out


# -- components and inference ------------------------------------------------------

def mi_variance(per_copy) -> float | np.ndarray:
    """``(1/M) sum_l (N_l - mean)^2`` over the last axis; 0 for a single copy."""
    arr = np.asarray(per_copy, dtype=float)
    if arr.shape[-1] == 0:
        raise ValueError("no per-copy estimates")
    v = np.mean((arr - arr.mean(axis=-1, keepdims=True)) ** 2, axis=-1)
    return float(v) if np.ndim(v) == 0 else v


def total_variance(poisson, across, mi):
    """Sum of the within-program, across-program and imputation components."""
    parts = [np.asarray(x, dtype=float) for x in (poisson, across, mi)]
    for name, x in zip(("poisson", "across", "mi"), parts):
        if np.any(x < 0):
            raise ValueError(f"negative {name} variance component")
    total = parts[0] + parts[1] + parts[2]
    return float(total) if np.ndim(total) == 0 else total


def z_test(observed, expected, variance):
    """``T = (N - N_hat) / sqrt(V)`` with a two-sided standard-normal p-value."""
    variance = np.asarray(variance, dtype=float)
    if np.any(variance <= 0):
        raise DegenerateTestError("Z-test needs a positive variance")
    T = (np.asarray(observed, float) - np.asarray(expected, float)) / np.sqrt(variance)
    p = 2 * stats.norm.sf(np.abs(T))
    if np.ndim(T) == 0:
        return float(T), float(p)
    return T, p


def confidence_interval(expected, variance, alpha, upper_share: float = 0.5):
    """Normal interval ``expected -/+ z sqrt(variance)``, not clamped at zero.

    ``upper_share`` is the fraction of ``alpha`` placed above the interval:
    0.5 gives the symmetric two-sided interval, 1 an interval open below
    (flags only excess counts), 0 one open above.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if not 0 <= upper_share <= 1:
        raise ValueError("upper_share must lie in [0, 1]")
    if np.any(np.asarray(variance) < 0):
        raise ValueError("variance must be nonnegative")
    sd = np.sqrt(np.asarray(variance, float))
    x = np.asarray(expected, float)
    z_lo = stats.norm.isf(alpha * (1 - upper_share))
    z_hi = stats.norm.isf(alpha * upper_share)
    with np.errstate(invalid="ignore"):
        lo = np.where(sd > 0, x - z_lo * sd, x)
        hi = np.where(sd > 0, x + z_hi * sd, x)
    if np.ndim(lo) == 0:
        return float(lo), float(hi)
    return lo, hi


def coverage(predictions, observed: pd.Series) -> float:
    """Share of programs whose observed count lies in the closed interval.

    ``predictions`` is a list of ProgramPrediction or a frame with
    ``level1``, ``ci_lo`` and ``ci_hi`` columns.
    """
    if isinstance(predictions, pd.DataFrame):
        frame = predictions.set_index("level1")[["ci_lo", "ci_hi"]]
    else:
        frame = pd.DataFrame({"ci_lo": [p.ci_lo for p in predictions],
                              "ci_hi": [p.ci_hi for p in predictions]},
                             index=[p.level1 for p in predictions])
    obs = pd.Series(observed)
    obs.index = obs.index.astype(str)
    frame.index = frame.index.astype(str)
    if set(frame.index) != set(obs.index):
        diff = sorted(set(frame.index) ^ set(obs.index))
        raise KeyError(f"program sets differ: {diff[:10]}")
    if frame.empty:
        raise ValueError("no programs")
    o = obs.reindex(frame.index).to_numpy(float)
    return float(np.mean((frame["ci_lo"].to_numpy() <= o) & (o <= frame["ci_hi"].to_numpy())))


@dataclass(frozen=True)
class VarianceReport:
    """Per-program variance components from one analysis."""

    components: pd.DataFrame  # columns poisson, across_group, mi, total
    estimator: str
    plan: BlockPlan | None = None

    def __post_init__(self):
        c = self.components
        if (c[["poisson", "across_group", "mi"]].to_numpy() < 0).any():
            raise ValueError("negative variance component")

    def to_json(self):
        return json.dumps({"estimator": self.estimator,
                           "plan": None if self.plan is None else self.plan.to_dict(),
                           "components": self.components.reset_index().to_dict("records")})
