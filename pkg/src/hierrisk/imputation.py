"""Deterministic missing-value fills and assembly of externally imputed copies."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .data import Dataset, load_dataset
from .errors import ValidationError

logger = logging.getLogger(__name__)


def locf_nocb(values) -> tuple[np.ndarray, bool]:
    """Fill gaps in one time-ordered series.

    Interior and trailing gaps take the last observed value; leading gaps
    take the first observed value.

    Returns
    -------
    filled : ndarray
    all_missing : bool
        True when nothing was observed; the series is returned unchanged.
    """
    s = pd.Series(np.asarray(values, dtype=float))
    if s.isna().all():
        return s.to_numpy(), True
    return s.ffill().bfill().to_numpy(), False


def windowed_max_fill(days, values, window_days: int = 365) -> np.ndarray:
    """Replace each missing value by the largest value observed in the trailing window.

    The window for a missing value at day ``t`` is ``[t - window_days, t]``,
    both ends inclusive. Missing values with no observation in the window
    stay missing.
    """
    if window_days <= 0:
        raise ValueError("window_days must be positive")
    days = np.asarray(days, dtype=float)
    values = np.asarray(values, dtype=float)
    out = values.copy()
    seen = ~np.isnan(values)
    od, ov = days[seen], values[seen]
    for i in np.flatnonzero(~seen):
        inside = (od >= days[i] - window_days) & (od <= days[i])
        if inside.any():
            out[i] = ov[inside].max()
    return out


@dataclass
class FillReport:
    """Outcome of :func:`fill_missing`: dropped columns and per-column flag shares."""

    dropped: list = field(default_factory=list)
    all_missing_share: dict = field(default_factory=dict)


def fill_missing(data: Dataset, windowed: Sequence[str] = (), window_days: int = 365,
                 drop_share: float = 0.5) -> tuple[Dataset, FillReport]:
    """Apply the deterministic fills subject by subject.

    Columns in ``windowed`` get :func:`windowed_max_fill` keyed on interval
    start days; all other columns get :func:`locf_nocb`. A column is dropped
    when more than ``drop_share`` of subjects have no observed value for it.
    """
    df = pd.DataFrame(data.covariates, columns=data.covariate_names)
    subj = pd.Series(data.level2_codes)
    report = FillReport()
    keep = []
    for name in data.covariate_names:
        col = df[name]
        observed_per_subject = col.notna().groupby(subj).any()
        share = float(1.0 - observed_per_subject.mean()) if len(col) else 0.0
        report.all_missing_share[name] = share
        if share > drop_share:
            logger.warning("dropping covariate %s: %.0f%% of subjects all-missing",
                           name, 100 * share)
            report.dropped.append(name)
            continue
        keep.append(name)
        if not col.isna().any():
            continue
        if name in windowed:
            filled = col.to_numpy().copy()
            for _, idx in subj.groupby(subj).groups.items():
                idx = np.asarray(idx)
                filled[idx] = windowed_max_fill(data.start[idx], filled[idx], window_days)
            df[name] = filled
        else:
            # rows are sorted by subject then start, so group-wise fills are time-ordered
            df[name] = col.groupby(subj).ffill().groupby(subj).bfill()
    return data.with_covariates(df[keep].to_numpy(float), tuple(keep)), report


@dataclass(frozen=True)
class MIStack:
    """``M`` completed copies of one dataset differing only in covariate values."""

    copies: tuple

    def __post_init__(self):
        object.__setattr__(self, "copies", tuple(self.copies))
        _check_aligned(self.copies)

    @property
    def M(self) -> int:
        return len(self.copies)

    @property
    def covariate_names(self) -> tuple:
        return self.copies[0].covariate_names

    def __getitem__(self, l) -> Dataset:
        return self.copies[l]

    def __iter__(self):
        return iter(self.copies)

    def __len__(self):
        return self.M

    def select_covariates(self, names) -> "MIStack":
        return MIStack(tuple(c.select_covariates(names) for c in self.copies))


def _check_aligned(copies):
    if not copies:
        raise ValidationError("MI stack needs at least one copy")
    ref = copies[0]
    for l, c in enumerate(copies[1:], start=2):
        if c.n_rows != ref.n_rows:
            raise ValidationError(f"copy {l}: {c.n_rows} rows, copy 1 has {ref.n_rows}")
        if c.covariate_names != ref.covariate_names:
            raise ValidationError(f"copy {l}: covariate names differ from copy 1")
        for name in ("level1", "level2", "start", "stop", "event"):
            diff = np.asarray(getattr(c, name)) != np.asarray(getattr(ref, name))
            if diff.any():
                i = int(np.flatnonzero(diff)[0])
                raise ValidationError(
                    f"copy {l}: row {i} (subject {ref.level2[i]}) differs from copy 1 "
                    f"in {name}")


def assemble_mi_stack(copies: Sequence[Dataset]) -> MIStack:
    """Validate alignment of imputed copies and wrap them as a stack."""
    return MIStack(tuple(copies))


def load_mi_stack(pattern: str, M: int, schema=None) -> MIStack:
    """Load copies from files named by ``pattern.format(l)`` for ``l = 1..M``."""
    if M < 1:
        raise ValueError("M must be at least 1")
    return assemble_mi_stack([load_dataset(pattern.format(l), schema)
                              for l in range(1, M + 1)])
