"""Counting-process data model with a two-level (program / subject) hierarchy.

Each row of a :class:`Dataset` is one at-risk interval ``(start, stop]`` for
one subject (level-2 group) attending one program (level-1 group), with an
event indicator at ``stop`` and covariate values held constant over the
interval.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import pandas as pd

from .errors import SchemaError, ValidationError

logger = logging.getLogger(__name__)

CANONICAL_COLUMNS = ("level1", "level2", "start", "stop", "event")


class GroupId(NamedTuple):
    level1: str
    level2: str


class AtRiskRow(NamedTuple):
    group: GroupId
    encounter_index: int
    start: float
    stop: float
    event: bool
    covariates: tuple


@dataclass(frozen=True, eq=False)
class Dataset:
    """At-risk intervals for all subjects, stored column-wise.

    Rows are canonicalised on construction: sorted by subject, then start
    time, with ``encounter`` renumbered ``1..m_ij`` inside each subject.

    Parameters
    ----------
    level1, level2 : array_like of str
        Program and subject labels per row.
    start, stop : array_like of float
        Interval bounds in relative days.
    event : array_like of bool
        Event indicator at ``stop``.
    covariates : ndarray, shape (n, p)
        Covariate values; NaN marks a missing value (allowed before
        imputation only).
    covariate_names : sequence of str
    structure : {"nested", "crossed"}, optional
        Inferred from the rows when omitted.
    """

    level1: np.ndarray
    level2: np.ndarray
    start: np.ndarray
    stop: np.ndarray
    event: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple
    structure: str | None = None
    encounter: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        level1 = np.asarray(self.level1).astype(str)
        level2 = np.asarray(self.level2).astype(str)
        start = np.asarray(self.start, dtype=float)
        stop = np.asarray(self.stop, dtype=float)
        event = np.asarray(self.event).astype(bool)
        n = len(start)
        names = tuple(str(c) for c in self.covariate_names)
        cov = np.asarray(self.covariates, dtype=float)
        cov = cov.reshape(n, len(names) if cov.size == 0 else -1)
        if not (len(level1) == len(level2) == len(stop) == len(event) == n):
            raise ValidationError("row arrays have different lengths")
        if cov.shape[1] != len(names):
            raise ValidationError(
                f"{cov.shape[1]} covariate columns but {len(names)} names")
        if len(set(names)) != len(names):
            raise ValidationError("duplicate covariate names")
        bad = ~(start < stop)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValidationError(
                f"subject {level2[i]}: interval ({start[i]}, {stop[i]}] "
                "has start >= stop")

        order = np.lexsort((start, level2))
        level1, level2 = level1[order], level2[order]
        start, stop, event, cov = start[order], stop[order], event[order], cov[order]

        same = level2[1:] == level2[:-1]
        overlap = same & (start[1:] < stop[:-1])
        if overlap.any():
            i = int(np.flatnonzero(overlap)[0])
            raise ValidationError(
                f"subject {level2[i]}: overlapping intervals "
                f"({start[i]}, {stop[i]}] and ({start[i + 1]}, {stop[i + 1]}]")

        # 1-based encounter index within subject
        first = np.r_[True, ~same]
        run_start = np.maximum.accumulate(np.where(first, np.arange(n), 0))
        encounter = np.arange(n) - run_start + 1

        structure = self.structure
        if structure is None:
            structure = "crossed" if _is_crossed(level1, level2) else "nested"
        elif structure not in ("nested", "crossed"):
            raise ValidationError(f"unknown structure {structure!r}")

        for arr in (level1, level2, start, stop, event, cov, encounter):
            arr.flags.writeable = False
        set_ = object.__setattr__
        set_(self, "level1", level1)
        set_(self, "level2", level2)
        set_(self, "start", start)
        set_(self, "stop", stop)
        set_(self, "event", event)
        set_(self, "covariates", cov)
        set_(self, "covariate_names", names)
        set_(self, "structure", structure)
        set_(self, "encounter", encounter)

    # -- basic shape -------------------------------------------------------
    @property
    def n_rows(self) -> int:
        return len(self.start)

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    @cached_property
    def _level1_index(self):
        labels, codes = np.unique(self.level1, return_inverse=True)
        return labels, codes

    @cached_property
    def _level2_index(self):
        labels, codes = np.unique(self.level2, return_inverse=True)
        return labels, codes

    @property
    def level1_labels(self) -> np.ndarray:
        return self._level1_index[0]

    @property
    def level1_codes(self) -> np.ndarray:
        return self._level1_index[1]

    @property
    def level2_labels(self) -> np.ndarray:
        return self._level2_index[0]

    @property
    def level2_codes(self) -> np.ndarray:
        return self._level2_index[1]

    @property
    def n_level1(self) -> int:
        return len(self.level1_labels)

    @property
    def n_level2(self) -> int:
        return len(self.level2_labels)

    def has_missing(self) -> bool:
        return bool(np.isnan(self.covariates).any())

    def rows(self) -> Iterator[AtRiskRow]:
        for i in range(self.n_rows):
            yield AtRiskRow(
                GroupId(self.level1[i], self.level2[i]),
                int(self.encounter[i]),
                float(self.start[i]),
                float(self.stop[i]),
                bool(self.event[i]),
                tuple(self.covariates[i]),
            )

    def __len__(self):
        return self.n_rows

    # -- derived datasets --------------------------------------------------
    def take(self, mask) -> "Dataset":
        """Row subset (boolean mask or integer index)."""
        return Dataset(self.level1[mask], self.level2[mask], self.start[mask],
                       self.stop[mask], self.event[mask], self.covariates[mask],
                       self.covariate_names, self.structure)

    def subset_level1(self, ids) -> "Dataset":
        """Rows belonging to the given programs."""
        return self.take(np.isin(self.level1, np.asarray(list(ids)).astype(str)))

    def drop_level1(self, ids) -> "Dataset":
        return self.take(~np.isin(self.level1, np.asarray(list(ids)).astype(str)))

    def with_covariates(self, covariates, names=None) -> "Dataset":
        """Same intervals and events, new covariate matrix (rows in canonical order)."""
        return Dataset(self.level1, self.level2, self.start, self.stop, self.event,
                       covariates, self.covariate_names if names is None else names,
                       self.structure)

    def select_covariates(self, names: Sequence[str]) -> "Dataset":
        idx = [self.covariate_names.index(n) for n in names]
        return self.with_covariates(self.covariates[:, idx], tuple(names))

    def truncate(self, cutoff: float) -> "Dataset":
        """Censor all follow-up at ``cutoff`` (partial-period validation)."""
        keep = self.start < cutoff
        stop = np.minimum(self.stop, cutoff)
        event = self.event & (self.stop <= cutoff)
        return Dataset(self.level1[keep], self.level2[keep], self.start[keep],
                       stop[keep], event[keep], self.covariates[keep],
                       self.covariate_names, self.structure)

    def check_relative_time(self):
        """Raise unless every subject's first interval starts at day 0."""
        first = pd.Series(self.start).groupby(self.level2_codes).min()
        bad = first.to_numpy() != 0
        if bad.any():
            subj = self.level2_labels[first.index[bad][0]]
            raise ValidationError(
                f"subject {subj}: first interval starts at "
                f"{first[first.index[bad][0]]}, expected 0")

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({
            "level1": self.level1,
            "level2": self.level2,
            "start": self.start,
            "stop": self.stop,
            "event": self.event.astype(int),
        })
        for j, name in enumerate(self.covariate_names):
            df[name] = self.covariates[:, j]
        return df

    @classmethod
    def from_frame(cls, df: pd.DataFrame, covariate_names=None, structure=None) -> "Dataset":
        if covariate_names is None:
            covariate_names = [c for c in df.columns if c not in CANONICAL_COLUMNS
                               and c != "encounter"]
        cov = df[list(covariate_names)].to_numpy(dtype=float) if covariate_names \
            else np.empty((len(df), 0))
        return cls(df["level1"].to_numpy(), df["level2"].to_numpy(),
                   df["start"].to_numpy(float), df["stop"].to_numpy(float),
                   df["event"].to_numpy(), cov, tuple(covariate_names), structure)


def _is_crossed(level1, level2) -> bool:
    if len(level1) == 0:
        return False
    pairs = pd.DataFrame({"a": level1, "b": level2}).drop_duplicates()
    return bool(pairs["b"].duplicated().any())


def observed_events(data: Dataset, j) -> int:
    """Observed event count for program ``j``, summed over its subjects."""
    j = str(j)
    mask = data.level1 == j
    if not mask.any():
        raise KeyError(f"program {j!r} not in dataset")
    return int(data.event[mask].sum())


def observed_by_program(data: Dataset) -> pd.Series:
    """Observed event counts for every program, indexed by label."""
    counts = np.bincount(data.level1_codes, weights=data.event,
                         minlength=data.n_level1)
    return pd.Series(counts.astype(int), index=pd.Index(data.level1_labels, name="level1"))


# -- CSV I/O ----------------------------------------------------------------

def _read_schema(schema) -> dict:
    if schema is None:
        return {}
    if isinstance(schema, (str, Path)):
        with open(schema) as fh:
            schema = json.load(fh)
    return dict(schema)


def load_dataset(path, schema=None) -> Dataset:
    """Read a counting-process CSV into a :class:`Dataset`.

    Parameters
    ----------
    path : path-like
        CSV with a header row. Empty fields are read as missing.
    schema : dict or path to JSON, optional
        Maps ``level1``, ``level2``, ``start``, ``stop``, ``event`` to column
        names and ``covariates`` to a list of columns. Without a schema the
        canonical names are assumed and all remaining columns are covariates.

    Raises
    ------
    SchemaError
        A mapped column is absent from the file.
    ValidationError
        A row has ``start >= stop``, a subject's intervals overlap, or a
        subject does not start at relative day 0.
    """
    schema = _read_schema(schema)
    df = pd.read_csv(path, dtype={schema.get("level1", "level1"): str,
                                  schema.get("level2", "level2"): str})
    mapping = {key: schema.get(key, key) for key in CANONICAL_COLUMNS}
    missing = [col for col in mapping.values() if col not in df.columns]
    covs = schema.get("covariates")
    if covs is None:
        covs = [c for c in df.columns if c not in mapping.values() and c != "encounter"]
    missing += [c for c in covs if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")
    renamed = df.rename(columns={v: k for k, v in mapping.items()})
    data = Dataset.from_frame(renamed, covs, schema.get("structure"))
    data.check_relative_time()
    return data


def write_dataset(data: Dataset, path) -> None:
    data.to_frame().to_csv(path, index=False)


# -- at-risk interval construction -----------------------------------------

@dataclass(frozen=True)
class IntervalRules:
    """Rules turning dated encounters into at-risk intervals.

    ``max_gap_days`` defaults to 18 months (548 days).
    """

    washout_days: int = 730
    lookback_days: int = 730
    max_gap_days: int = 548
    exclude_post_transplant: bool = True
    infant_at_risk: bool = True

    def __post_init__(self):
        for name in ("washout_days", "lookback_days", "max_gap_days"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Exclusion:
    level2: str
    reason: str
    day: float | None = None


def clean_encounters(encounters: pd.DataFrame, rules: IntervalRules,
                     period_end: float | None = None):
    """Apply the encounter-level exclusion rules.

    Returns the retained encounters and a list of :class:`Exclusion` records.
    Expected columns: ``level1``, ``level2``, ``day``, ``infection`` and
    optionally ``transplant_day`` and ``birth_day``.
    """
    required = ["level1", "level2", "day", "infection"]
    missing = [c for c in required if c not in encounters.columns]
    if missing:
        raise SchemaError(f"encounters missing column(s) {missing}")
    df = encounters.copy()
    df["level1"] = df["level1"].astype(str)
    df["level2"] = df["level2"].astype(str)
    log: list[Exclusion] = []

    undated = df.loc[df["day"].isna(), "level2"].unique()
    for s in undated:
        log.append(Exclusion(s, "encounter without date"))
        logger.info("excluding subject %s: encounter without date", s)
    df = df[~df["level2"].isin(undated)]

    if rules.exclude_post_transplant and "transplant_day" in df.columns:
        post = df["transplant_day"].notna() & (df["day"] > df["transplant_day"])
        for s, d in df.loc[post, ["level2", "day"]].itertuples(index=False):
            log.append(Exclusion(s, "post-transplant encounter", float(d)))
        df = df[~post]

    if period_end is not None:
        df = df[df["day"] <= period_end]

    # same day, different programs: ambiguous relocation
    nprog = df.groupby(["level2", "day"])["level1"].transform("nunique")
    clash = nprog > 1
    for s, d in df.loc[clash, ["level2", "day"]].drop_duplicates().itertuples(index=False):
        log.append(Exclusion(s, "simultaneous encounters at two programs", float(d)))
        logger.warning("dropping encounters of %s on day %s: two programs", s, d)
    df = df[~clash]

    df = df.sort_values(["level2", "day"], kind="mergesort")
    # duplicate same-day records at one program collapse to one; infection if any
    df["infection"] = df.groupby(["level2", "day"])["infection"].transform("max")
    df = df.drop_duplicates(["level2", "day"], keep="last")
    return df.reset_index(drop=True), log


def build_at_risk_intervals(encounters, rules: IntervalRules | None = None,
                            covariates: Sequence[str] | None = None,
                            period_start: float | None = None,
                            period_end: float | None = None,
                            relative: bool = True) -> Dataset:
    """Construct at-risk intervals from dated encounter records.

    A subject becomes at risk once ``lookback_days`` of infection-free,
    observed history have accrued (infants are at risk from their first
    encounter when ``rules.infant_at_risk``). An at-risk period ends at the
    next infection (event), at loss to follow-up, or at ``period_end``; after
    an event the subject is at risk again ``washout_days`` later. Encounter
    gaps longer than ``max_gap_days`` break the chain and the look-back
    restarts after the gap. Periods are split at encounter days so that each
    row carries the covariates recorded at its start.

    A :class:`Dataset` passed as ``encounters`` is already in at-risk form and
    is returned unchanged.
    """
    if isinstance(encounters, Dataset):
        return encounters
    rules = rules or IntervalRules()
    df, log = clean_encounters(encounters, rules, period_end)
    reserved = {"level1", "level2", "day", "infection", "transplant_day", "birth_day"}
    if covariates is None:
        covariates = [c for c in df.columns if c not in reserved]
    covariates = list(covariates)

    out_l1, out_l2, out_a, out_b, out_ev, out_z = [], [], [], [], [], []
    for subj, g in df.groupby("level2", sort=True):
        rows = _subject_intervals(g, rules, covariates, period_start, period_end)
        if rows is None:
            logger.info("excluding subject %s: at-risk start on infection date", subj)
            log.append(Exclusion(subj, "at-risk start equals infection date"))
            continue
        if not rows:
            continue
        origin = min(r[1] for r in rows) if relative else 0.0
        for prog, a, b, ev, z in rows:
            out_l1.append(prog)
            out_l2.append(subj)
            out_a.append(a - origin)
            out_b.append(b - origin)
            out_ev.append(ev)
            out_z.append(z)
    cov = np.array(out_z, dtype=float).reshape(len(out_a), len(covariates))
    return Dataset(np.array(out_l1, dtype=str), np.array(out_l2, dtype=str),
                   np.array(out_a, float), np.array(out_b, float),
                   np.array(out_ev, bool), cov, tuple(covariates))


def _subject_intervals(g: pd.DataFrame, rules: IntervalRules, covariates,
                       period_start, period_end):
    days = g["day"].to_numpy(float)
    infected = g["infection"].to_numpy().astype(bool)
    progs = g["level1"].to_numpy()
    zs = g[covariates].to_numpy(float) if covariates else np.empty((len(g), 0))
    birth = g["birth_day"].iloc[0] if "birth_day" in g.columns else np.nan

    breaks = np.flatnonzero(np.diff(days) > rules.max_gap_days) + 1
    chains = np.split(np.arange(len(days)), breaks)
    periods = []  # (a, b, event)
    for c_no, idx in enumerate(chains):
        d0, dk = days[idx[0]], days[idx[-1]]
        infant = (rules.infant_at_risk and not np.isnan(birth)
                  and d0 - birth < rules.lookback_days)
        at = d0 if infant else d0 + rules.lookback_days
        end = dk
        last_chain = c_no == len(chains) - 1
        if last_chain and period_end is not None and period_end - dk <= rules.max_gap_days:
            end = period_end
        for i in idx:
            if not infected[i]:
                continue
            e = days[i]
            if e == at:
                return None
            if e > at:
                periods.append((at, e, True))
                at = e + rules.washout_days
            else:
                at = max(at, e + rules.lookback_days)
        if at < end:
            periods.append((at, end, False))

    rows = []
    for a, b, ev in periods:
        if period_start is not None:
            if b <= period_start:
                continue
            a = max(a, period_start)
        cuts = days[(days > a) & (days < b)]
        bounds = np.r_[a, cuts, b]
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            k = np.searchsorted(days, lo, side="right") - 1
            rows.append((progs[k], lo, hi, ev and hi == b, tuple(zs[k])))
    return rows
