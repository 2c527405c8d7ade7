import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from hierrisk import (Dataset, DegenerateTestError, FitConfig, block_jackknife_variance,
                      block_partition, breslow_hazard, confidence_interval, coverage, fit_model,
                      loo_jackknife_variance, mi_variance, total_variance, z_test)
from hierrisk.variance import jackknife_spread, ordered_map

from conftest import random_dataset


# -- block plans -------------------------------------------------------------------

def test_plan_271_10():
    plan = block_partition(271, 10, seed=1)
    assert plan.q == 27 and len(plan.sampled_level1_ids) == 270


def test_plan_edge_cases():
    assert block_partition(10, 10, 0).q == 1
    plan = block_partition(7, 3, 0)
    assert plan.q == 2 and len(plan.sampled_level1_ids) == 6 and len(plan.excluded) == 1
    with pytest.raises(ValueError):
        block_partition(5, 6, 0)


@settings(max_examples=200)
@given(st.integers(2, 2000).flatmap(lambda N: st.tuples(st.just(N), st.integers(2, N))),
       st.integers(0, 2**32 - 1))
def test_plan_floor_law(Nm, seed):
    N, m = Nm
    plan = block_partition(N, m, seed)
    assert 0 <= N - m * plan.q < m
    flat = [x for b in plan.blocks for x in b]
    assert all(len(b) == plan.q for b in plan.blocks)
    assert len(set(flat)) == len(flat) and sorted(flat) == sorted(plan.sampled_level1_ids)
    assert set(flat).isdisjoint(plan.excluded)


def test_plan_reproducible():
    assert block_partition(50, 5, 9) == block_partition(50, 5, 9)
    assert block_partition(50, 5, 9) != block_partition(50, 5, 10)


# -- jackknife formulas ------------------------------------------------------------

def test_spread_zero_when_identical():
    assert np.all(jackknife_spread(np.full((3, 5), 2.5), q=4) == 0)


def test_spread_m2_by_hand():
    a, d, q = 3.0, 0.8, 6
    # (m-1) q sum_b (x_b - mean)^2 with deviations +-d/2
    assert jackknife_spread(np.array([[a, a + d]]), q)[0] == pytest.approx(1 * q * 2 * (d / 2) ** 2,
                                                                        rel=1e-15)
    assert jackknife_spread(np.array([[a, a + d]]), q, "classical")[0] == pytest.approx(
        0.5 * 2 * (d / 2) ** 2, rel=1e-15)


def _loop_expected(data_train, data_eval, cfg):
    """Refit, then Eq.-style expected count per program by explicit loops."""
    f = fit_model(data_train, cfg)
    h = breslow_hazard(f.beta_hat, None, data_train)
    out = {}
    for j in data_eval.level1_labels:
        tot = 0.0
        for r in np.flatnonzero(data_eval.level1 == j):
            w = np.exp(data_eval.covariates[r] @ f.beta_hat)
            for s, dl in zip(h.times, h.increments):
                if data_eval.start[r] < s <= data_eval.stop[r]:
                    tot += w * dl
        out[j] = tot
    return pd.Series(out)


@pytest.mark.parametrize("cfg", [FitConfig(random_effects=None), FitConfig()],
                         ids=["cox", "frailty"])
def test_block_jackknife_matches_script(cfg):
    d = random_dataset(5, n_subjects=40, n_programs=5)
    plan = block_partition(d.level1_labels, 2, seed=3)
    got = block_jackknife_variance(d, cfg, plan)
    sampled = d.subset_level1(plan.sampled_level1_ids)
    est = pd.concat([_loop_expected(sampled.drop_level1(list(b)), d, cfg) for b in plan.blocks],
                    axis=1).to_numpy()
    dev = est - est.mean(axis=1, keepdims=True)
    expected = (plan.m - 1) * plan.q * (dev ** 2).sum(axis=1)
    np.testing.assert_allclose(got.to_numpy(), expected, rtol=1e-10, atol=1e-14)


def test_loo_matches_script():
    d = random_dataset(6, n_subjects=30, n_programs=3)
    cfg = FitConfig(random_effects=None)
    got = loo_jackknife_variance(d, cfg)
    full = _loop_expected(d, d, cfg)
    loo = pd.concat([_loop_expected(d.drop_level1([v]), d, cfg) for v in d.level1_labels],
                    axis=1)
    expected = 2 * ((loo.sub(full, axis=0)) ** 2).sum(axis=1)
    np.testing.assert_allclose(got.to_numpy(), expected.to_numpy(), rtol=1e-10, atol=1e-14)


def _duplicated_programs(k):
    base = random_dataset(12, n_subjects=15, n_programs=1)
    n = base.n_rows
    return Dataset(np.repeat([f"P{g}" for g in range(k)], n),
                   np.concatenate([np.char.add(f"{g}_", base.level2) for g in range(k)]),
                   np.tile(base.start, k), np.tile(base.stop, k), np.tile(base.event, k),
                   np.tile(base.covariates, (k, 1)), base.covariate_names)


def test_duplicate_programs_give_zero_variance():
    d = _duplicated_programs(6)
    plan = block_partition(d.level1_labels, 3, seed=0)
    v = block_jackknife_variance(d, FitConfig(random_effects=None), plan)
    np.testing.assert_allclose(v.to_numpy(), 0.0, atol=1e-20)


def test_ordered_map_independent_of_workers(monkeypatch):
    d = random_dataset(5, n_subjects=40, n_programs=5)
    plan = block_partition(d.level1_labels, 5, seed=3)
    cfg = FitConfig(random_effects=None)
    monkeypatch.setenv("HIERRISK_THREADS", "1")
    one = block_jackknife_variance(d, cfg, plan)
    monkeypatch.setenv("HIERRISK_THREADS", "3")
    three = block_jackknife_variance(d, cfg, plan)
    pd.testing.assert_series_equal(one, three, check_exact=True)
    assert ordered_map(abs, [-2, 1, -3]) == [2, 1, 3]


@pytest.mark.slow
def test_loo_exceeds_block_for_most_programs(desk_one_year):
    data, _ = desk_one_year
    cfg = FitConfig()
    block = block_jackknife_variance(data, cfg, block_partition(data.level1_labels, 10, 4))
    loo = loo_jackknife_variance(data, cfg)
    share = float(np.mean(loo.to_numpy() >= block.reindex(loo.index).to_numpy()))
    print(f"loo >= block for {share:.2f} of programs; "
          f"median ratio {np.median(loo / block.reindex(loo.index)):.2f}")
    assert share >= 0.7


# -- components and inference ------------------------------------------------------

def test_mi_variance():
    assert mi_variance([5, 5, 5]) == 0
    assert mi_variance([4, 6]) == 1
    assert mi_variance([3.0]) == 0
    x = np.random.default_rng(2).normal(10, 2, size=10)
    assert mi_variance(x) == pytest.approx(sum((v - sum(x) / 10) ** 2 for v in x) / 10,
                                           rel=1e-12)


def test_total_variance():
    assert total_variance(0, 0, 0) == 0
    assert total_variance(3, 1, 0.5) == 4.5
    with pytest.raises(ValueError):
        total_variance(1, -0.1, 0)


def test_z_test():
    assert z_test(5, 5, 2) == (0.0, 1.0)
    T, p = z_test(9, 5, 4)
    assert T == 2 and p == pytest.approx(0.0455, abs=5e-5)
    assert p == pytest.approx(2 * (1 - stats.norm.cdf(2)), rel=1e-10)
    with pytest.raises(DegenerateTestError):
        z_test(1, 1, 0)
    Ts, ps = z_test(np.array([9, 3]), np.array([5, 4]), np.array([4, 1]))
    assert Ts[1] == z_test(3, 4, 1)[0] and ps[0] == p


def test_confidence_interval():
    assert confidence_interval(3.0, 0.0, 0.1) == (3.0, 3.0)
    lo, hi = confidence_interval(5, 4, 0.05)
    assert lo == pytest.approx(5 - 2 * 1.959963984540054, abs=1e-10)
    assert (round(lo, 4), round(hi, 4)) == (1.0801, 8.9199)
    assert confidence_interval(1.0, 25.0, 0.05)[0] < 0  # unclamped


def test_one_sided_interval():
    lo, hi = confidence_interval(5, 4, 0.1, upper_share=1.0)
    assert lo == -np.inf and hi == pytest.approx(5 + 2 * stats.norm.ppf(0.9))


def test_width_monotone_in_level():
    widths = [np.subtract(*confidence_interval(5, 3, 1 - c)[::-1])
              for c in (0.7, 0.8, 0.9, 0.95, 0.995)]
    assert np.all(np.diff(widths) > 0)


def test_coverage_counts_inclusive():
    obs = pd.Series({"A": 3, "B": 10, "C": 1})
    frame = pd.DataFrame({"level1": ["A", "B", "C"], "ci_lo": [3, 0, 2], "ci_hi": [4, 10, 5]})
    assert coverage(frame, obs) == pytest.approx(2 / 3)
    wide = frame.assign(ci_lo=-1e9, ci_hi=1e9)
    assert coverage(wide, obs) == 1.0
    assert coverage(frame.assign(ci_lo=100, ci_hi=200), obs) == 0.0
    with pytest.raises(KeyError):
        coverage(frame, obs.drop("C"))


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0, 50), st.floats(0.01, 30), st.integers(0, 80)),
                min_size=1, max_size=20))
def test_coverage_monotone_in_level(rows):
    exp_, var, obs = (np.array(c) for c in zip(*rows))
    names = [f"P{i}" for i in range(len(rows))]
    covs = []
    for c in (0.7, 0.8, 0.9, 0.95, 0.995):
        lo, hi = confidence_interval(exp_, var, 1 - c)
        covs.append(coverage(pd.DataFrame({"level1": names, "ci_lo": lo, "ci_hi": hi}),
                             pd.Series(obs, index=names)))
    assert np.all(np.diff(covs) >= 0)
