import numpy as np
import pytest
from scipy import stats

from hierrisk import FitConfig, MIStack, SelectionError, rubin_pool, stepdown_select
from hierrisk.pooling import pooled_fit, stepdown_rule

from conftest import signal_noise_stack


def test_identical_copies_have_no_between_variance():
    b = np.array([0.3, -0.2])
    W = np.array([[0.04, 0.01], [0.01, 0.09]])
    r = rubin_pool([b, b, b], [W, W, W])
    np.testing.assert_array_equal(r.between, 0)
    np.testing.assert_allclose(r.total_var, W)
    assert np.all(np.isinf(r.df))
    np.testing.assert_allclose(r.p_values, 2 * stats.norm.sf(np.abs(b / np.sqrt(np.diag(W)))))


def test_two_copies_by_hand():
    r = rubin_pool([[1.0], [3.0]], [[[1.0]], [[1.0]]])
    assert r.beta_bar[0] == 2 and r.between[0, 0] == 2
    assert r.total_var[0, 0] == 4 and r.t_stats[0] == 1
    # df = (M-1)(1 + W/((1+1/M)B))^2 = (1 + 1/3)^2
    assert r.df[0] == pytest.approx(16 / 9)


def test_single_copy_rejected():
    with pytest.raises(ValueError):
        rubin_pool([[1.0]], [[[1.0]]])


def test_matches_loop_script():
    rng = np.random.default_rng(4)
    M, p = 10, 3
    betas = rng.normal(size=(M, p))
    covs = []
    for _ in range(M):
        A = rng.normal(size=(p, p))
        covs.append(A @ A.T / 10 + np.eye(p) * 0.01)
    r = rubin_pool(betas, covs)
    for k in range(p):
        mean = sum(betas[l, k] for l in range(M)) / M
        W = sum(covs[l][k, k] for l in range(M)) / M
        B = sum((betas[l, k] - mean) ** 2 for l in range(M)) / (M - 1)
        V = W + (1 + 1 / M) * B
        df = (M - 1) * (1 + W / ((1 + 1 / M) * B)) ** 2
        t = mean / V ** 0.5
        assert r.beta_bar[k] == pytest.approx(mean, rel=1e-12)
        assert r.total_var[k, k] == pytest.approx(V, rel=1e-10)
        assert r.df[k] == pytest.approx(df, rel=1e-10)
        assert r.p_values[k] == pytest.approx(2 * stats.t.sf(abs(t), df), rel=1e-10)
        assert r.total_var[k, k] >= W


def test_copy_order_invariance():
    rng = np.random.default_rng(5)
    betas = rng.normal(size=(4, 2))
    covs = np.array([np.eye(2) * v for v in (0.1, 0.2, 0.3, 0.4)])
    a = rubin_pool(betas, covs)
    perm = [2, 0, 3, 1]
    b = rubin_pool(betas[perm], covs[perm])
    np.testing.assert_allclose(a.total_var, b.total_var, rtol=1e-13)
    np.testing.assert_allclose(a.p_values, b.p_values, rtol=1e-13)


# -- step-down rule ----------------------------------------------------------------

def test_rule_all_small_stops():
    assert stepdown_rule({"a": 0.01, "b": 0.09}) == ("stop", [])


def test_rule_drop_three():
    rule, names = stepdown_rule({"a": 0.7, "b": 0.6, "c": 0.55, "d": 0.05})
    assert rule == "drop3" and names == ["a", "b", "c"]


def test_rule_drop_three_caps_at_threshold_count():
    assert stepdown_rule({"a": 0.9, "b": 0.3, "c": 0.2}) == ("drop3", ["a"])


def test_rule_drop_two_and_one():
    assert stepdown_rule({"a": 0.4, "b": 0.3, "c": 0.26, "d": 0.01}) == ("drop2", ["a", "b"])
    assert stepdown_rule({"a": 0.2, "b": 0.15}) == ("drop1", ["a"])


def test_rule_exactly_quarter_is_drop1():
    assert stepdown_rule({"a": 0.25, "b": 0.25}) == ("drop1", ["a"])


def test_rule_ties_broken_by_name():
    assert stepdown_rule({"z": 0.6, "y": 0.6, "x": 0.6, "w": 0.6})[1] == ["w", "x", "y"]


# -- selection on simulated stacks ------------------------------------------------------

def test_trace_invariants_and_replay():
    stack = signal_noise_stack(3)
    cfg = FitConfig(random_effects=None)
    trace = stepdown_select(stack, cfg)
    dropped = trace.dropped
    assert len(dropped) == len(set(dropped))
    assert set(dropped) | set(trace.final_covariates) == set(stack.covariate_names)
    assert set(dropped).isdisjoint(trace.final_covariates)
    for it in trace.iterations:
        assert len(it["dropped"]) <= {"drop3": 3, "drop2": 2, "drop1": 1, "stop": 0}[it["rule"]]
    assert trace.iterations[-1]["rule"] == "stop"
    assert stepdown_select(stack, cfg).to_json() == trace.to_json()
    assert "final:" in trace.to_text()


def test_strong_covariates_stop_immediately():
    stack = signal_noise_stack(4, p_noise=0, beta=1.0)
    trace = stepdown_select(stack, FitConfig(random_effects=None))
    assert trace.dropped == []
    assert [it["rule"] for it in trace.iterations] == ["stop"]
    assert trace.final_covariates == list(stack.covariate_names)


def test_t_statistics_scale_invariant():
    stack = signal_noise_stack(5)
    cfg = FitConfig(random_effects=None)
    a = pooled_fit(stack, cfg)
    scaled = MIStack([c.with_covariates(c.covariates * np.r_[3.0, np.ones(9)]) for c in stack])
    b = pooled_fit(scaled, cfg)
    np.testing.assert_allclose(b.t_stats, a.t_stats, rtol=1e-8)
    assert b.beta_bar[0] == pytest.approx(a.beta_bar[0] / 3, rel=1e-8)


def test_fit_failure_carries_trace():
    stack = signal_noise_stack(6)
    const = MIStack([c.with_covariates(np.c_[c.covariates, np.ones(c.n_rows)],
                                       c.covariate_names + ("flat",)) for c in stack])
    with pytest.raises(SelectionError) as info:
        stepdown_select(const, FitConfig(random_effects=None))
    assert info.value.trace is not None and info.value.trace.initial[-1] == "flat"


def test_single_copy_rejected():
    stack = signal_noise_stack(7, M=2)
    with pytest.raises(ValueError):
        stepdown_select(MIStack(stack.copies[:1]))
