import numpy as np
import pytest

from hierrisk import Dataset, SimConfig, gen_dataset


def naive_loglik(beta, offsets, data):
    """Breslow partial log-likelihood by explicit loops over event times."""
    eta = data.covariates @ np.asarray(beta, float)
    if offsets is not None:
        eta = eta + offsets
    total = 0.0
    for t in np.unique(data.stop[data.event]):
        dying = data.event & (data.stop == t)
        risk = (data.start < t) & (data.stop >= t)
        total += eta[dying].sum() - dying.sum() * np.log(np.exp(eta[risk]).sum())
    return total


def naive_breslow(beta, offsets, data):
    eta = data.covariates @ np.asarray(beta, float)
    if offsets is not None:
        eta = eta + offsets
    times = np.unique(data.stop[data.event])
    inc = []
    for t in times:
        risk = (data.start < t) & (data.stop >= t)
        inc.append((data.event & (data.stop == t)).sum() / np.exp(eta[risk]).sum())
    return times, np.array(inc)


def nelson_aalen(data):
    times = np.unique(data.stop[data.event])
    out = []
    for t in times:
        n_risk = ((data.start < t) & (data.stop >= t)).sum()
        out.append((data.event & (data.stop == t)).sum() / n_risk)
    return times, np.array(out)


def random_dataset(seed, n_subjects=25, n_programs=4, p=2, ties=False):
    """Small counting-process data with recurrent intervals and optional tied times."""
    rng = np.random.default_rng(seed)
    l1, l2, a, b, ev = [], [], [], [], []
    for i in range(n_subjects):
        t = 0.0
        for _ in range(rng.integers(1, 4)):
            length = float(rng.integers(1, 20)) if ties else float(rng.exponential(10) + 0.01)
            l1.append(f"P{rng.integers(n_programs)}")
            l2.append(f"S{i:03d}")
            a.append(t)
            b.append(t + length)
            ev.append(rng.random() < 0.5)
            t += length + (float(rng.integers(0, 3)) if ties else rng.exponential(2))
    Z = rng.normal(size=(len(a), p))
    return Dataset(l1, l2, a, b, ev, Z, [f"x{k}" for k in range(p)])


@pytest.fixture(scope="session")
def desk_one_year():
    return gen_dataset(SimConfig(n_level1=30, n_level2=1500, period="one_year", seed=11))


def signal_noise_stack(seed, M=3, n_programs=30, n_subjects=1500, p_signal=5, p_noise=5,
                       beta=0.5, impute_share=0.1):
    """Stack of M imputed copies with known signal and noise covariates.

    Subjects carry standard-normal covariates and one at-risk interval
    ``(0, min(T, C)]`` with exponential event time ``T`` (program effects
    N(0, 0.05)) and censoring at day 365 or an exponential draw. Copies
    differ only in ``impute_share`` of the covariate cells, which are
    re-drawn around the true value as an imputer would.
    """
    rng = np.random.default_rng(seed)
    p = p_signal + p_noise
    Z = rng.normal(size=(n_subjects, p))
    prog = rng.integers(0, n_programs, n_subjects)
    b = rng.normal(0, np.sqrt(0.05), n_programs)
    rate = 1e-3 * np.exp(Z[:, :p_signal] @ np.full(p_signal, beta) + b[prog])
    T = rng.exponential(1 / rate)
    C = np.minimum(rng.exponential(600, n_subjects), 365.0)
    stop = np.maximum(np.minimum(T, C), 1e-3)
    names = [f"s{k + 1}" for k in range(p_signal)] + [f"n{k + 1}" for k in range(p_noise)]
    base = dict(level1=[f"P{j:02d}" for j in prog],
                level2=[f"S{i:05d}" for i in range(n_subjects)],
                start=np.zeros(n_subjects), stop=stop, event=T <= C, covariate_names=names)
    copies = []
    for _ in range(M):
        Zc = Z.copy()
        hole = rng.random(Z.shape) < impute_share
        Zc[hole] += rng.normal(0, 0.5, hole.sum())
        copies.append(Dataset(covariates=Zc, **base))
    from hierrisk import MIStack
    return MIStack(copies)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
