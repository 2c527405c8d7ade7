"""Cox / mixed-effect Andersen-Gill fitting by (penalized) partial likelihood.

Risk sets follow the counting-process convention: row ``r`` is at risk at
event time ``s`` when ``start_r < s <= stop_r``. Ties use the Breslow
approximation throughout, which keeps the partial likelihood consistent with
the Breslow baseline hazard returned by :func:`breslow_hazard`.

Risk-set sums are accumulated with a difference array over the sorted
distinct event times, so one likelihood/gradient/Hessian evaluation costs
O(n p + K p^2) instead of O(n K).
"""

from __future__ import annotations

import json
import logging
import math
import weakref
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, sparse, stats

from .data import Dataset
from .errors import ConvergenceError, NumericalError, ValidationError

logger = logging.getLogger(__name__)

MONOTONE_LIMIT = 15.0
RAY_CHECK_FROM = 5.0


# -- risk-set bookkeeping ----------------------------------------------------

class RiskSets:
    """Index structure for at-risk sums over the distinct event times."""

    def __init__(self, start, stop, event):
        event = np.asarray(event, bool)
        self.times = np.unique(stop[event])
        K = len(self.times)
        n = len(start)
        self.K = K
        self.lo = np.searchsorted(self.times, start, side="right")
        self.hi = np.searchsorted(self.times, stop, side="right")
        self.event = event
        self.d = np.bincount(np.searchsorted(self.times, stop[event]),
                             minlength=K).astype(float)
        rows = np.r_[self.lo, self.hi]
        cols = np.r_[np.arange(n), np.arange(n)]
        vals = np.r_[np.ones(n), -np.ones(n)]
        self._diff = sparse.csr_matrix((vals, (rows, cols)), shape=(K + 1, n))

    def at_risk_sum(self, v):
        """``S[k] = sum_{r at risk at times[k]} v[r]`` for 1-d or 2-d ``v``."""
        acc = self._diff @ v
        return np.cumsum(acc, axis=0)[: self.K]

    def group_sum(self, w, codes, n_groups):
        """At-risk sums of ``w`` split by group: shape (K, n_groups)."""
        size = (self.K + 1) * n_groups
        acc = (np.bincount(self.lo * n_groups + codes, weights=w, minlength=size)
               - np.bincount(self.hi * n_groups + codes, weights=w, minlength=size))
        return np.cumsum(acc.reshape(self.K + 1, n_groups), axis=0)[: self.K]

    def interval_sum(self, a):
        """``c[r] = sum_{k: row r at risk at times[k]} a[k]``."""
        cum = np.r_[0.0, np.cumsum(a)]
        return cum[self.hi] - cum[self.lo]


_RISKSET_CACHE: "weakref.WeakKeyDictionary[Dataset, RiskSets]" = weakref.WeakKeyDictionary()


def risk_sets(data: Dataset) -> RiskSets:
    rs = _RISKSET_CACHE.get(data)
    if rs is None:
        rs = RiskSets(data.start, data.stop, data.event)
        _RISKSET_CACHE[data] = rs
    return rs


# -- likelihood ---------------------------------------------------------------

@dataclass
class _Terms:
    """Random-effect design: integer group codes per term."""

    codes: list
    sizes: list
    labels: list
    names: list

    @property
    def total(self):
        return int(sum(self.sizes))

    def expand(self, b):
        out = []
        pos = 0
        for g in self.sizes:
            out.append(b[pos:pos + g])
            pos += g
        return out


_NO_TERMS = _Terms([], [], [], [])


def _evaluate(rs: RiskSets, Z, x, offset, terms: _Terms, penalty, hessian=True):
    """Penalized log partial likelihood, gradient and Hessian in ``x = (beta, b)``."""
    p = Z.shape[1]
    beta = x[:p]
    bs = terms.expand(x[p:])
    eta = Z @ beta
    if offset is not None:
        eta = eta + offset
    for codes, b in zip(terms.codes, bs):
        eta = eta + b[codes]
    if not np.all(np.isfinite(eta)):
        raise NumericalError("non-finite linear predictor")
    shift = eta.max() if len(eta) else 0.0
    w = np.exp(eta - shift)
    S0 = rs.at_risk_sum(w)
    if np.any(S0 <= 0):
        raise NumericalError("empty or underflowed risk set")
    d = rs.d
    ev = rs.event
    ll = eta[ev].sum() - np.sum(d * (np.log(S0) + shift))
    a = d / S0

    S1z = rs.at_risk_sum(w[:, None] * Z)
    grad = [Z[ev].sum(axis=0) - a @ S1z]
    S1w = []
    for codes, g in zip(terms.codes, terms.sizes):
        sw = rs.group_sum(w, codes, g)
        S1w.append(sw)
        grad.append(np.bincount(codes[ev], minlength=g) - a @ sw)
    grad = np.concatenate(grad)
    ll_pen = ll
    if terms.total:
        b_all = x[p:]
        ll_pen = ll - 0.5 * np.sum(penalty * b_all ** 2)
        grad[p:] -= penalty * b_all
    if not hessian:
        return ll_pen, grad, None, ll

    c = rs.interval_sum(a)
    v = w * c
    u = a / S0
    dim = p + terms.total
    H = np.empty((dim, dim))
    H[:p, :p] = -(Z.T @ (v[:, None] * Z) - S1z.T @ (u[:, None] * S1z))
    pos = p
    offsets = []
    for codes, g, sw in zip(terms.codes, terms.sizes, S1w):
        offsets.append(pos)
        cross = np.empty((g, p))
        vz = v[:, None] * Z
        for j in range(p):
            cross[:, j] = np.bincount(codes, weights=vz[:, j], minlength=g)
        block = -(cross - sw.T @ (u[:, None] * S1z))
        H[pos:pos + g, :p] = block
        H[:p, pos:pos + g] = block.T
        pos += g
    for t, (codes_t, g_t, sw_t) in enumerate(zip(terms.codes, terms.sizes, S1w)):
        o_t = offsets[t]
        for s in range(t, len(terms.codes)):
            codes_s, g_s, sw_s = terms.codes[s], terms.sizes[s], S1w[s]
            o_s = offsets[s]
            if s == t:
                first = np.diag(np.bincount(codes_t, weights=v, minlength=g_t))
            else:
                first = sparse.coo_matrix((v, (codes_t, codes_s)),
                                          shape=(g_t, g_s)).toarray()
            block = -(first - sw_t.T @ (u[:, None] * sw_s))
            H[o_t:o_t + g_t, o_s:o_s + g_s] = block
            if s != t:
                H[o_s:o_s + g_s, o_t:o_t + g_t] = block.T
    if terms.total:
        idx = np.arange(p, dim)
        H[idx, idx] -= penalty
    return ll_pen, grad, H, ll


def partial_loglik(beta, offsets, data: Dataset):
    """Breslow log partial likelihood of ``data`` with exact derivatives.

    Parameters
    ----------
    beta : array_like, shape (p,)
    offsets : array_like, shape (n,) or None
        Fixed per-row additions to the linear predictor (random-effect
        contributions); ``None`` means zero.
    data : Dataset

    Returns
    -------
    loglik : float
    gradient : ndarray, shape (p,)
    hessian : ndarray, shape (p, p)
    """
    beta = np.asarray(beta, float)
    if data.has_missing():
        raise ValidationError("covariates contain missing values")
    off = None if offsets is None else np.asarray(offsets, float)
    ll, g, H, _ = _evaluate(risk_sets(data), data.covariates, beta, off, _NO_TERMS, None)
    return ll, g, H


# -- Newton ------------------------------------------------------------------

def _solve_step(H, g):
    try:
        cf = linalg.cho_factor(-H, check_finite=False)
        return linalg.cho_solve(cf, g, check_finite=False)
    except linalg.LinAlgError:
        return np.linalg.lstsq(-H, g, rcond=None)[0]


def _newton(rs, Z, x0, offset, terms, penalty, max_iter=50, tol=1e-9):
    x = np.array(x0, float)
    f, g, H, ll = _evaluate(rs, Z, x, offset, terms, penalty)
    for it in range(1, max_iter + 1):
        step = _solve_step(H, g)
        t = 1.0
        while True:
            x_new = x + t * step
            try:
                f_new, g_new, H_new, ll_new = _evaluate(rs, Z, x_new, offset, terms, penalty)
            except NumericalError:
                f_new = -np.inf
            if f_new >= f - 1e-12 * max(abs(f), 1.0):
                break
            t *= 0.5
            if t < 1e-10:
                # no ascent direction left: at the optimum up to rounding
                return x, f, g, H, ll, it, True
        change = abs(f_new - f)
        x, f, g, H, ll = x_new, f_new, g_new, H_new, ll_new
        if change <= tol * max(abs(f), 1.0):
            return x, f, g, H, ll, it, True
    return x, f, g, H, ll, max_iter, False


# -- fit objects ---------------------------------------------------------------

@dataclass(frozen=True)
class RandomEffectSpec:
    """Gaussian random intercepts on one or two grouping levels."""

    terms: tuple = ("level1",)
    structure: str = "nested"
    variance_init: tuple = (0.1,)

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ValueError("at least one random-effect term required")
        if any(t not in ("level1", "level2") for t in terms):
            raise ValueError(f"unknown random-effect term in {terms}")
        if len(set(terms)) != len(terms):
            raise ValueError("duplicate random-effect term")
        init = tuple(float(v) for v in np.broadcast_to(self.variance_init, len(terms)))
        if any(v <= 0 for v in init):
            raise ValueError("variance_init must be positive")
        if self.structure not in ("nested", "crossed"):
            raise ValueError(f"unknown structure {self.structure!r}")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "variance_init", init)


@dataclass(frozen=True)
class FitConfig:
    """Settings shared by the model fits, resampling refits and selection."""

    random_effects: RandomEffectSpec | None = field(default_factory=RandomEffectSpec)
    robust_groups: str | None = None
    max_iter: int = 50
    tol: float = 1e-9
    theta_bounds: tuple = (1e-8, 10.0)
    theta_tol: float = 1e-4
    include_frailty_in_prediction: bool = False

    def to_dict(self):
        re = self.random_effects
        return {
            "random_effects": None if re is None else {
                "terms": list(re.terms), "structure": re.structure,
                "variance_init": list(re.variance_init)},
            "robust_groups": self.robust_groups,
            "max_iter": self.max_iter,
            "tol": self.tol,
            "theta_bounds": list(self.theta_bounds),
            "theta_tol": self.theta_tol,
            "include_frailty_in_prediction": self.include_frailty_in_prediction,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        re = d.pop("random_effects", {})
        if re is not None:
            re = RandomEffectSpec(tuple(re.get("terms", ("level1",))),
                                  re.get("structure", "nested"),
                                  tuple(re.get("variance_init", (0.1,))))
        if "theta_bounds" in d:
            d["theta_bounds"] = tuple(d["theta_bounds"])
        return cls(random_effects=re, **d)


@dataclass(frozen=True, eq=False)
class FrailtyFit:
    """Estimates from one Cox or mixed-effect Andersen-Gill fit.

    ``beta_hat`` and ``beta_cov`` are on the original covariate scale.
    ``random_effects`` maps a term name (``"level1"``/``"level2"``) to a
    Series of predicted random intercepts indexed by group label; it is empty
    for a plain Cox fit.
    """

    covariate_names: tuple
    beta_hat: np.ndarray
    beta_cov: np.ndarray
    random_effects: dict
    theta_hat: dict
    loglik: float
    converged: bool
    iterations: int
    integrated_loglik: float | None = None
    degenerate: tuple = ()
    warnings: tuple = ()
    robust: bool = False
    training_level1: tuple = ()

    @property
    def se(self):
        return np.sqrt(np.diag(self.beta_cov))

    @property
    def p_values(self):
        z = self.beta_hat / self.se
        return 2 * stats.norm.sf(np.abs(z))

    def offsets(self, data: Dataset) -> np.ndarray:
        """Per-row sum of predicted random effects (0 for unseen groups)."""
        out = np.zeros(data.n_rows)
        for term, series in self.random_effects.items():
            labels = data.level1 if term == "level1" else data.level2
            out += pd.Series(labels).map(series).fillna(0.0).to_numpy(float)
        return out

    def to_dict(self):
        return {
            "covariate_names": list(self.covariate_names),
            "beta_hat": dict(zip(self.covariate_names, map(float, self.beta_hat))),
            "beta_cov": self.beta_cov.tolist(),
            "theta_hat": {k: float(v) for k, v in self.theta_hat.items()},
            "random_effects": {k: {str(i): float(x) for i, x in s.items()}
                               for k, s in self.random_effects.items()},
            "loglik": float(self.loglik),
            "integrated_loglik": None if self.integrated_loglik is None
            else float(self.integrated_loglik),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "degenerate": list(self.degenerate),
            "warnings": list(self.warnings),
            "robust": bool(self.robust),
            "training_level1": list(self.training_level1),
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d):
        names = tuple(d["covariate_names"])
        return cls(
            names,
            np.array([d["beta_hat"][n] for n in names], float),
            np.array(d["beta_cov"], float).reshape(len(names), len(names)),
            {k: pd.Series(v, dtype=float) for k, v in d.get("random_effects", {}).items()},
            dict(d.get("theta_hat", {})),
            d["loglik"], d["converged"], d["iterations"],
            d.get("integrated_loglik"), tuple(d.get("degenerate", ())),
            tuple(d.get("warnings", ())), d.get("robust", False),
            tuple(d.get("training_level1", ())),
        )


@dataclass(frozen=True)
class HazardTable:
    """Jumps of the Breslow baseline cumulative hazard."""

    times: np.ndarray
    increments: np.ndarray

    @property
    def cumulative(self):
        return np.cumsum(self.increments)

    def cumulative_at(self, t):
        """Right-continuous cumulative hazard ``sum_{s <= t} dLambda(s)``."""
        cum = np.r_[0.0, self.cumulative]
        return cum[np.searchsorted(self.times, t, side="right")]

    def to_frame(self):
        return pd.DataFrame({"time": self.times, "increment": self.increments,
                             "cumulative": self.cumulative})


# -- fitting -------------------------------------------------------------------

def _standardize(Z, names):
    mean = Z.mean(axis=0)
    sd = Z.std(axis=0)
    const = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if const.any():
        bad = [names[i] for i in np.flatnonzero(const)]
        raise ValidationError(f"constant covariate column(s): {bad}")
    return (Z - mean) / sd, mean, sd


def _check_fit_input(data: Dataset):
    if data.n_events == 0:
        raise ValidationError("no events in data")
    if data.has_missing():
        raise ValidationError("covariates contain missing values; impute first")


def _grouped_sandwich(rs, Zs, beta_s, info_inv, groups):
    eta = Zs @ beta_s
    w = np.exp(eta - eta.max())
    S0 = rs.at_risk_sum(w)
    S1 = rs.at_risk_sum(w[:, None] * Zs)
    xbar = S1 / S0[:, None]
    a = rs.d / S0
    c = rs.interval_sum(a)
    E = np.vstack([np.zeros(Zs.shape[1]), np.cumsum(a[:, None] * xbar, axis=0)])
    resid = -w[:, None] * (Zs * c[:, None] - (E[rs.hi] - E[rs.lo]))
    ev = rs.event
    k_ev = rs.hi[ev] - 1
    resid[ev] += Zs[ev] - xbar[k_ev]
    labels, codes = np.unique(groups, return_inverse=True)
    U = np.zeros((len(labels), Zs.shape[1]))
    np.add.at(U, codes, resid)
    return info_inv @ (U.T @ U) @ info_inv


def fit_cox(data: Dataset, robust_groups: str | None = None, init=None,
            max_iter: int = 50, tol: float = 1e-9) -> FrailtyFit:
    """Cox / Andersen-Gill fit by Newton-Raphson on the partial likelihood.

    Parameters
    ----------
    data : Dataset
    robust_groups : {"level1", "level2"}, optional
        Cluster level for a grouped sandwich covariance built from score
        residuals. The model-based inverse information is used otherwise.
    init : array_like, optional
        Starting coefficients on the original scale.

    Raises
    ------
    ConvergenceError
        No convergence within ``max_iter`` iterations.
    """
    _check_fit_input(data)
    Zs, mean, sd = _standardize(data.covariates, data.covariate_names)
    rs = risk_sets(data)
    x0 = np.zeros(data.p) if init is None else np.asarray(init, float) * sd
    x, f, g, H, ll, iters, ok = _newton(rs, Zs, x0, None, _NO_TERMS, None, max_iter, tol)
    if not ok:
        raise ConvergenceError(f"Cox fit did not converge in {max_iter} iterations",
                               last_iterate=x / sd, iterations=iters)
    info_inv = _inverse(-H)
    warn = _monotone_warnings(
        x, data.covariate_names,
        lambda v: _evaluate(rs, Zs, v, None, _NO_TERMS, None, hessian=False)[0])
    cov_s = info_inv
    if robust_groups is not None:
        groups = data.level1 if robust_groups == "level1" else data.level2
        cov_s = _grouped_sandwich(rs, Zs, x, info_inv, groups)
    scale = 1.0 / sd
    return FrailtyFit(
        data.covariate_names, x * scale, cov_s * np.outer(scale, scale), {}, {},
        float(ll), True, iters, warnings=warn, robust=robust_groups is not None,
        training_level1=tuple(data.level1_labels))


def _inverse(A):
    A = 0.5 * (A + A.T)
    try:
        cf = linalg.cho_factor(A, check_finite=False)
        return linalg.cho_solve(cf, np.eye(len(A)), check_finite=False)
    except linalg.LinAlgError:
        return np.linalg.pinv(A)


def _monotone_warnings(beta_s, names, loglik=None):
    """Flag coefficients beyond the limit, or large ones along which the
    likelihood still rises (the Newton stop can precede the limit)."""
    big = np.abs(beta_s) > MONOTONE_LIMIT
    if loglik is not None and not big.any() and np.abs(beta_s).max(initial=0) > RAY_CHECK_FROM:
        here = loglik(beta_s)
        if loglik(1.5 * beta_s) >= here - 1e-6 * max(abs(here), 1.0):
            big = np.abs(beta_s) > RAY_CHECK_FROM
    if big.any():
        bad = [names[i] for i in np.flatnonzero(big)]
        logger.warning("possible monotone likelihood for %s", bad)
        return (f"monotone likelihood: {bad}",)
    return ()


def _terms_for(data: Dataset, spec: RandomEffectSpec) -> _Terms:
    codes, sizes, labels = [], [], []
    for term in spec.terms:
        if term == "level1":
            lab, cod = data.level1_labels, data.level1_codes
        else:
            lab, cod = data.level2_labels, data.level2_codes
        codes.append(cod)
        sizes.append(len(lab))
        labels.append(lab)
    return _Terms(codes, sizes, labels, list(spec.terms))


def _golden_max(f, lo, hi, tol):
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (c, fc) if fc > fd else (d, fd)


def fit_frailty(data: Dataset, spec: RandomEffectSpec | None = None, init=None,
                config: FitConfig | None = None, theta=None) -> FrailtyFit:
    """Mixed-effect Andersen-Gill fit by penalized partial likelihood.

    For fixed variances ``theta`` the penalized partial likelihood
    ``l(beta, b) - sum_t |b_t|^2 / (2 theta_t)`` is maximised jointly over
    fixed and random effects by Newton iterations. Each ``theta_t`` is then
    chosen by golden-section search on ``log theta`` maximising the Laplace
    approximation of the integrated partial likelihood,
    ``PPL - 0.5 log det(I + Theta^{1/2} (-l_bb) Theta^{1/2})``.

    Parameters
    ----------
    data : Dataset
    spec : RandomEffectSpec, optional
        Defaults to ``config.random_effects``.
    init : array_like, optional
        Starting fixed effects on the original scale (typically a Cox fit).
    config : FitConfig, optional
    theta : sequence of float, optional
        Fix the variances instead of searching.

    Returns
    -------
    FrailtyFit
        ``degenerate`` lists terms whose variance sits at the lower search
        bound (random effect shrunk to zero).
    """
    config = config or FitConfig()
    spec = spec or config.random_effects or RandomEffectSpec()
    _check_fit_input(data)
    Zs, mean, sd = _standardize(data.covariates, data.covariate_names)
    rs = risk_sets(data)
    terms = _terms_for(data, spec)
    p = data.p
    state = {"x": np.r_[np.zeros(p) if init is None else np.asarray(init, float) * sd,
                        np.zeros(terms.total)]}
    cache = {}

    def solve(log_theta):
        key = tuple(np.round(log_theta, 12))
        if key in cache:
            return cache[key]
        th = np.exp(np.asarray(log_theta, float))
        pen = np.concatenate([np.full(g, 1.0 / t) for g, t in zip(terms.sizes, th)])
        x, f, g, H, ll, iters, ok = _newton(rs, Zs, state["x"], None, terms, pen,
                                            config.max_iter, config.tol)
        if not ok:
            raise ConvergenceError(
                f"penalized Newton did not converge at theta={th}",
                last_iterate=x[:p] / sd, iterations=iters)
        state["x"] = x
        Hbb = -H[p:, p:] - np.diag(pen)  # -l_bb, unpenalized
        root = np.sqrt(np.repeat(th, terms.sizes))
        A = np.eye(terms.total) + root[:, None] * Hbb * root[None, :]
        try:
            logdet = 2 * np.sum(np.log(np.diag(linalg.cholesky(A, check_finite=False))))
        except linalg.LinAlgError:
            logdet = np.linalg.slogdet(A)[1]
        res = (f - 0.5 * logdet, x, f, H, iters)
        cache[key] = res
        return res

    lo, hi = (math.log(b) for b in config.theta_bounds)
    if theta is not None:
        log_theta = np.log(np.broadcast_to(np.asarray(theta, float), len(spec.terms))).copy()
    else:
        log_theta = np.log(np.asarray(spec.variance_init, float)).clip(lo, hi)
        sweeps = 1 if len(spec.terms) == 1 else 2
        for _ in range(sweeps):
            for t in range(len(spec.terms)):
                def objective(v, t=t):
                    lt = log_theta.copy()
                    lt[t] = v
                    return solve(lt)[0]
                log_theta[t], _ = _golden_max(objective, lo, hi, config.theta_tol)
    il, x, f, H, iters = solve(log_theta)
    th = np.exp(log_theta)
    degenerate = tuple(t for t, v in zip(spec.terms, log_theta)
                       if theta is None and v - lo <= 2 * config.theta_tol)
    cov_s = _inverse(-H)[:p, :p]
    scale = 1.0 / sd
    re = {name: pd.Series(b, index=lab)
          for name, lab, b in zip(terms.names, terms.labels, terms.expand(x[p:]))}
    return FrailtyFit(
        data.covariate_names, x[:p] * scale, cov_s * np.outer(scale, scale), re,
        dict(zip(spec.terms, map(float, th))), float(f), True, int(iters),
        integrated_loglik=float(il), degenerate=degenerate,
        warnings=_monotone_warnings(x[:p], data.covariate_names),
        training_level1=tuple(data.level1_labels))


def fit_model(data: Dataset, config: FitConfig | None = None, init=None) -> FrailtyFit:
    """Cox fit, followed by the frailty fit when random effects are configured."""
    config = config or FitConfig()
    if config.random_effects is None:
        return fit_cox(data, config.robust_groups, init, config.max_iter, config.tol)
    if init is None:
        init = fit_cox(data, None, None, config.max_iter, config.tol).beta_hat
    return fit_frailty(data, config.random_effects, init, config)


def breslow_hazard(beta, offsets, data: Dataset) -> HazardTable:
    """Breslow estimator of the baseline hazard increments.

    ``dLambda(s) = dN(s) / sum_{r: start_r < s <= stop_r} exp(Z_r beta + offset_r)``
    at every distinct event time ``s``.
    """
    beta = np.asarray(beta, float)
    if not np.all(np.isfinite(beta)):
        raise ValueError("beta must be finite")
    rs = risk_sets(data)
    eta = data.covariates @ beta
    if offsets is not None:
        eta = eta + np.asarray(offsets, float)
    w = np.exp(eta)
    S0 = rs.at_risk_sum(w)
    if np.any(S0 <= 0):
        k = int(np.flatnonzero(S0 <= 0)[0])
        raise ValidationError(f"empty risk set at event time {rs.times[k]}")
    return HazardTable(rs.times.copy(), rs.d / S0)
