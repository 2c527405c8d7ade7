"""Synthetic two-level recurrent-event data from a piecewise-exponential model.

Every subject shares the dataset's encounter time points ``t_1 = 0 < ... <
t_G``. Time-invariant covariates are fixed per subject, time-varying ones
are constant on ``[t_g, t_{g+1})``, and the hazard on that piece is

    h0 * exp(Z1 beta1 + Z2(t_g) beta2 + b_subject + b_program).

Events are found by memoryless stepping through the pieces; after an event
the subject is at risk again once the washout has passed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.linalg import toeplitz

from .data import Dataset

PERIODS = {
    "three_year": {"n_timepoints": 12, "period_length_days": 1100,
                   "censor_rate_param": 1 / 600, "mu2": tuple(range(-5, 7))},
    "one_year": {"n_timepoints": 4, "period_length_days": 400,
                 "censor_rate_param": 1 / 300, "mu2": (-1, 0, 1, 2)},
}


@dataclass(frozen=True)
class SimConfig:
    """Generator parameters; period-specific fields default from ``period``.

    ``re_variance_scale`` is the variance of the normal draw whose absolute
    value becomes the random-effect variance at each level.
    """

    n_level1: int = 150
    n_level2: int = 10000
    period: str = "three_year"
    n_timepoints: int | None = None
    period_length_days: float | None = None
    h0: float = float(np.exp(-8))
    beta: tuple = (0.5,) * 10
    re_variance_scale: float = 0.001
    censor_rate_param: float | None = None
    washout_days: float = 730
    n_invariant: int = 5
    mu1: float = 0.0
    sigma1_diag: float = 0.1
    sigma1_offdiag: float = 0.02
    mu2: tuple | None = None
    a_range: tuple = (0.0, 0.1)
    seed: int = 0
    subject_prefix: str = "S"

    def __post_init__(self):
        if self.period not in PERIODS:
            raise ValueError(f"period must be one of {sorted(PERIODS)}")
        base = PERIODS[self.period]
        for name in ("n_timepoints", "period_length_days", "censor_rate_param", "mu2"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, base[name])
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "mu2", tuple(float(m) for m in self.mu2))
        object.__setattr__(self, "a_range", tuple(self.a_range))
        if self.n_level1 < 1 or self.n_level2 < 1:
            raise ValueError("need at least one program and one subject")
        if self.n_timepoints < 1 or len(self.mu2) != self.n_timepoints:
            raise ValueError("mu2 must have one mean per time point")
        if self.period_length_days <= self.n_timepoints:
            raise ValueError("period too short for the number of time points")
        if self.h0 < 0 or self.re_variance_scale < 0 or self.censor_rate_param <= 0:
            raise ValueError("h0 and re_variance_scale must be >= 0, censoring rate > 0")
        if not 0 < self.n_invariant < len(self.beta):
            raise ValueError("beta must cover the invariant and varying covariates")
        if self.washout_days <= 0:
            raise ValueError("washout_days must be positive")

    @property
    def n_varying(self) -> int:
        return len(self.beta) - self.n_invariant

    @property
    def covariate_names(self) -> tuple:
        return (tuple(f"z1_{k + 1}" for k in range(self.n_invariant))
                + tuple(f"z2_{k + 1}" for k in range(self.n_varying)))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("beta", "mu2", "a_range"):
            if k in d and d[k] is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SimTruth:
    """Latent quantities behind one simulated dataset."""

    timepoints: np.ndarray
    a: float
    variance_subject: float
    variance_program: float
    subject_effects: pd.Series
    program_effects: pd.Series
    assignment: pd.Series
    event_times: pd.DataFrame  # level2, time
    censor_times: pd.Series
    n_events: pd.Series = field(default=None)

    def to_json(self, **kw):
        return json.dumps({
            "timepoints": self.timepoints.tolist(), "a": self.a,
            "variance_subject": self.variance_subject,
            "variance_program": self.variance_program,
            "subject_effects": self.subject_effects.to_dict(),
            "program_effects": self.program_effects.to_dict(),
            "assignment": self.assignment.to_dict(),
            "event_times": self.event_times.to_dict("records"),
            "censor_times": self.censor_times.to_dict(),
        }, **kw)


def _timepoints(rng, G, L):
    # t_1 = 0 plus G-1 distinct rounded draws from U(G, L)
    pts = set()
    while len(pts) < G - 1:
        need = G - 1 - len(pts)
        pts.update(np.round(rng.uniform(G, L, need)).astype(int).tolist())
    return np.r_[0.0, np.sort(np.fromiter(pts, float))]


def _program_labels(n):
    width = max(3, len(str(n)))
    return np.array([f"P{j + 1:0{width}d}" for j in range(n)])


def gen_dataset(config: SimConfig, program_effects: pd.Series | None = None):
    """Simulate one dataset.

    Parameters
    ----------
    config : SimConfig
    program_effects : Series, optional
        Program random effects to reuse (e.g. for a later period of the same
        programs); drawn fresh when omitted.

    Returns
    -------
    Dataset
        Rows split at the encounter time points, times relative to day 0.
    SimTruth
    """
    rng = np.random.default_rng(config.seed)
    n, J, G = config.n_level2, config.n_level1, config.n_timepoints
    L = float(config.period_length_days)
    t = _timepoints(rng, G, L)
    bounds = np.r_[t, L]

    p1, p2 = config.n_invariant, config.n_varying
    sigma1 = np.full((p1, p1), config.sigma1_offdiag)
    np.fill_diagonal(sigma1, config.sigma1_diag)
    Z1 = rng.multivariate_normal(np.full(p1, config.mu1), sigma1, size=n)
    a = float(rng.uniform(*config.a_range))
    sigma2 = a * toeplitz(np.arange(G, 0, -1, dtype=float))
    Z2 = rng.multivariate_normal(np.asarray(config.mu2), sigma2, size=(n, p2))  # n, p2, G

    sd_scale = np.sqrt(config.re_variance_scale)
    var_subject = abs(rng.normal(0.0, sd_scale))
    var_program = abs(rng.normal(0.0, sd_scale))
    b_subject = rng.normal(0.0, np.sqrt(var_subject), n)
    programs = _program_labels(J)
    if program_effects is None:
        b_prog = rng.normal(0.0, np.sqrt(var_program), J)
        program_effects = pd.Series(b_prog, index=programs)
    else:
        program_effects = pd.Series(program_effects, dtype=float)
        program_effects.index = program_effects.index.astype(str)
        rng.normal(0.0, 1.0, J)  # keep the stream aligned with the fresh-draw case
        b_prog = program_effects.reindex(programs).to_numpy()
        if np.isnan(b_prog).any():
            raise ValueError("program_effects must cover every program")
    prog = rng.integers(0, J, n)
    C = rng.exponential(1.0 / config.censor_rate_param, n)

    beta1 = np.asarray(config.beta[:p1])
    beta2 = np.asarray(config.beta[p1:])
    lp = (Z1 @ beta1)[:, None] + np.einsum("kpg,p->kg", Z2, beta2) \
        + (b_subject + b_prog[prog])[:, None]
    hazard = config.h0 * np.exp(lp)  # n, G

    end = np.minimum(C, L)
    max_events = int(np.ceil(L / config.washout_days)) + 1
    starts = [np.zeros(n)]
    events = []
    cur = np.zeros(n)
    active = np.ones(n, bool)
    piece_end = bounds[1:]
    for _ in range(max_events):
        E = rng.standard_exponential((n, G))
        if not active.any():
            break
        ps = np.maximum(cur[:, None], t[None, :])
        with np.errstate(divide="ignore"):
            S = np.where(hazard > 0, E / np.where(hazard > 0, hazard, 1.0), np.inf)
        hit = (piece_end[None, :] > cur[:, None]) & (ps + S < piece_end[None, :])
        any_hit = hit.any(axis=1)
        g = hit.argmax(axis=1)
        T = ps[np.arange(n), g] + S[np.arange(n), g]
        ev = active & any_hit & (T <= end)
        events.append(np.where(ev, T, np.nan))
        cur = np.where(ev, T + config.washout_days, cur)
        active = ev & (cur < end)
        starts.append(np.where(active, cur, np.nan))

    data, ev_frame = _rows(config, t, L, Z1, Z2, prog, programs, end, starts, events)
    subjects = _subject_labels(config)
    truth = SimTruth(
        timepoints=t, a=a, variance_subject=float(var_subject),
        variance_program=float(var_program),
        subject_effects=pd.Series(b_subject, index=subjects),
        program_effects=program_effects,
        assignment=pd.Series(programs[prog], index=subjects),
        event_times=ev_frame,
        censor_times=pd.Series(C, index=subjects),
    )
    truth.n_events = ev_frame.groupby("level2").size().reindex(subjects, fill_value=0)
    return data, truth


def _subject_labels(config):
    width = max(5, len(str(config.n_level2)))
    return np.array([f"{config.subject_prefix}{i + 1:0{width}d}"
                     for i in range(config.n_level2)])


def _rows(config, t, L, Z1, Z2, prog, programs, end, starts, events):
    """Split each at-risk period at the time points into counting-process rows."""
    n = len(prog)
    subjects = _subject_labels(config)
    bounds = np.r_[t, L]
    cols = {k: [] for k in ("i", "a", "b", "ev", "g")}
    ev_rows = []
    for k, s in enumerate(starts):
        ok = ~np.isnan(s)
        if not ok.any():
            continue
        stop_ev = events[k] if k < len(events) else np.full(n, np.nan)
        has_ev = ~np.isnan(stop_ev)
        stop = np.where(has_ev, stop_ev, end)
        ok &= s < stop
        idx = np.flatnonzero(ok)
        for i in idx:
            a0, b0 = s[i], stop[i]
            g0 = np.searchsorted(bounds, a0, side="right") - 1
            g1 = np.searchsorted(bounds, b0, side="left") - 1
            for g in range(g0, g1 + 1):
                lo = max(a0, bounds[g])
                hi = min(b0, bounds[g + 1])
                cols["i"].append(i)
                cols["a"].append(lo)
                cols["b"].append(hi)
                cols["ev"].append(bool(has_ev[i]) and hi == b0)
                cols["g"].append(g)
        ev_rows.extend((subjects[i], stop_ev[i]) for i in np.flatnonzero(has_ev & ok))
    i = np.asarray(cols["i"], int)
    g = np.asarray(cols["g"], int)
    cov = np.column_stack([Z1[i], Z2[i, :, g]]) if len(i) else np.empty((0, len(config.beta)))
    data = Dataset(programs[prog[i]], subjects[i], np.asarray(cols["a"]),
                   np.asarray(cols["b"]), np.asarray(cols["ev"], bool), cov,
                   config.covariate_names, "nested")
    ev_frame = pd.DataFrame(ev_rows, columns=["level2", "time"])
    return data, ev_frame


def sim_diagnostics(data: Dataset, truth: SimTruth):
    """Censoring rate, second-event rate and total events.

    The censoring rate is the share of subjects without any event; the
    second-event rate is the share with two or more events. Subjects without
    rows still count in the denominator.
    """
    subjects = truth.assignment.index.astype(str)
    counts = (pd.Series(data.event.astype(int)).groupby(data.level2).sum()
              .reindex(subjects, fill_value=0))
    n = len(subjects)
    return (float((counts == 0).sum() / n), float((counts >= 2).sum() / n),
            int(counts.sum()))
