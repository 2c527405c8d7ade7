"""Observed and risk-adjusted expected event counts per program."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from .cox import FitConfig, FrailtyFit, HazardTable, breslow_hazard, fit_model
from .data import Dataset

logger = logging.getLogger(__name__)


def row_expected(beta, hazard: HazardTable, data: Dataset, offsets=None) -> np.ndarray:
    """Expected events per row: ``exp(Z beta + offset) * (Lambda(stop) - Lambda(start))``.

    The hazard difference sums the jumps at times ``s`` with
    ``start < s <= stop``, so each row collects exactly the jumps of the
    event times at which it is at risk.
    """
    eta = data.covariates @ np.asarray(beta, float)
    if offsets is not None:
        eta = eta + offsets
    return np.exp(eta) * (hazard.cumulative_at(data.stop) - hazard.cumulative_at(data.start))


def _check_programs(fit: FrailtyFit, data: Dataset):
    if not fit.training_level1:
        return
    unknown = np.setdiff1d(data.level1_labels, np.asarray(fit.training_level1, dtype=str))
    if len(unknown):
        raise KeyError(f"programs absent from training: {list(unknown)}")


def _warn_extrapolation(hazard: HazardTable, data: Dataset, level=logging.WARNING):
    if len(hazard.times) and data.n_rows and data.stop.max() > hazard.times[-1]:
        logger.log(level, "evaluation follow-up extends to %g, past the last training "
                       "event time %g; no hazard mass there", data.stop.max(),
                       hazard.times[-1])


def expected_by_program(fit: FrailtyFit, hazard: HazardTable, data: Dataset,
                        include_frailty: bool = False,
                        check_programs: bool = True) -> pd.Series:
    """Expected event count of every program in ``data``.

    Parameters
    ----------
    fit : FrailtyFit
        Supplies the fixed effects (and random effects when
        ``include_frailty``).
    hazard : HazardTable
        Baseline hazard from the same training fit.
    data : Dataset
        Evaluation rows; every program must appear in the training data.
    check_programs : bool
        Resampling refits evaluate programs left out of their training set
        and switch this check off.

    Raises
    ------
    KeyError
        Lists evaluation programs missing from training.
    """
    if check_programs:
        _check_programs(fit, data)
        _warn_extrapolation(hazard, data)
    else:
        _warn_extrapolation(hazard, data, logging.DEBUG)
    offsets = fit.offsets(data) if include_frailty else None
    rows = row_expected(fit.beta_hat, hazard, data, offsets)
    sums = np.bincount(data.level1_codes, weights=rows, minlength=data.n_level1)
    return pd.Series(sums, index=pd.Index(data.level1_labels, name="level1"))


def expected_events(fit: FrailtyFit, hazard: HazardTable, data: Dataset, j,
                    include_frailty: bool = False) -> float:
    """Expected event count of program ``j``."""
    j = str(j)
    if j not in set(data.level1_labels):
        raise KeyError(f"program {j!r} not in evaluation data")
    return float(expected_by_program(fit, hazard, data.subset_level1([j]),
                                     include_frailty)[j])


def training_hazard(fit: FrailtyFit, data: Dataset, include_frailty: bool = False):
    """Breslow hazard on the training data, matched to the prediction exponent."""
    offsets = fit.offsets(data) if include_frailty else None
    return breslow_hazard(fit.beta_hat, offsets, data)


def fit_and_expect(train: Dataset, evaluations, config: FitConfig | None = None,
                   init=None):
    """Fit on ``train`` and return the fit plus expected counts for each evaluation set."""
    config = config or FitConfig()
    fit = fit_model(train, config, init)
    hazard = training_hazard(fit, train, config.include_frailty_in_prediction)
    return fit, [expected_by_program(fit, hazard, ev, config.include_frailty_in_prediction)
                 for ev in evaluations]


def pool_expected(per_copy) -> float:
    """Average expected count over imputed copies."""
    arr = np.asarray(per_copy, dtype=float)
    if arr.size == 0:
        raise ValueError("no per-copy estimates to pool")
    return float(arr.mean())


@dataclass(frozen=True)
class ProgramPrediction:
    """Observed and expected counts of one program with its interval and flag."""

    level1: str
    observed: int
    expected_per_copy: tuple
    expected_pooled: float
    poisson: float
    across_group: float
    mi: float
    total_variance: float
    ci_lo: float
    ci_hi: float
    level: float
    flag: str
    z: float
    p_value: float

    def to_dict(self):
        d = asdict(self)
        d["expected_per_copy"] = list(self.expected_per_copy)
        return d


def flag_for(observed, lo, hi) -> str:
    """``above`` / ``below`` when outside the closed interval, else ``within``."""
    if observed > hi:
        return "above"
    if observed < lo:
        return "below"
    return "within"


def predict_programs(observed: pd.Series, expected_per_copy: pd.DataFrame,
                     across_group: pd.Series, level: float = 0.9,
                     upper_share: float = 0.5) -> list[ProgramPrediction]:
    """Combine counts and variance components into per-program predictions.

    Parameters
    ----------
    observed : Series
        Observed counts indexed by program.
    expected_per_copy : DataFrame
        Rows are programs, columns imputed copies.
    across_group : Series
        Resampling variance averaged over copies, indexed by program.
    level : float
        Confidence level of the interval.
    upper_share : float
        Share of the non-coverage probability put above the interval; 0.5 is
        the symmetric two-sided interval.
    """
    from .variance import confidence_interval, mi_variance, total_variance, z_test

    programs = expected_per_copy.index
    missing = programs.difference(observed.index).union(programs.difference(across_group.index))
    if len(missing):
        raise KeyError(f"programs without observed counts or variance: {list(missing)}")
    out = []
    for j in programs:
        per = expected_per_copy.loc[j].to_numpy(float)
        pooled = pool_expected(per)
        mi = mi_variance(per)
        across = float(across_group[j])
        total = total_variance(pooled, across, mi)
        lo, hi = confidence_interval(pooled, total, 1 - level, upper_share=upper_share)
        obs = int(observed[j])
        if total > 0:
            z, p = z_test(obs, pooled, total)
        else:
            z, p = float("nan"), float("nan")
        out.append(ProgramPrediction(str(j), obs, tuple(map(float, per)), pooled, pooled,
                                     across, mi, total, lo, hi, level,
                                     flag_for(obs, lo, hi), z, p))
    return out


def predictions_frame(preds) -> pd.DataFrame:
    """One row per program; per-copy expectations as ``expected_copy_<l>`` columns."""
    rows = []
    for p in preds:
        d = p.to_dict()
        per = d.pop("expected_per_copy")
        for l, v in enumerate(per, start=1):
            d[f"expected_copy_{l}"] = v
        rows.append(d)
    return pd.DataFrame(rows)
