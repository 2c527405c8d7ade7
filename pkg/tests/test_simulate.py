import numpy as np
import pandas as pd
import pytest

from hierrisk import Dataset, SimConfig, fit_cox, gen_dataset, sim_diagnostics
from hierrisk.simulate import SimTruth

DESK = dict(n_level1=30, n_level2=1500)


def test_defaults_follow_period():
    three = SimConfig()
    assert (three.n_timepoints, three.period_length_days) == (12, 1100)
    assert three.censor_rate_param == pytest.approx(1 / 600)
    one = SimConfig(period="one_year")
    assert (one.n_timepoints, one.period_length_days, one.mu2) == (4, 400, (-1, 0, 1, 2))
    assert one.h0 == pytest.approx(np.exp(-8)) and one.beta == (0.5,) * 10


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        SimConfig(period="five_year")
    with pytest.raises(ValueError):
        SimConfig(mu2=(0.0,))


def test_zero_hazard_gives_no_events():
    data, truth = gen_dataset(SimConfig(h0=0.0, seed=1, **DESK))
    assert data.n_events == 0
    assert sim_diagnostics(data, truth) == (1.0, 0.0, 0)


def test_constant_hazard_matches_exponential_cdf():
    # one piece, no covariate or random effects, censoring practically absent
    n, L = 100_000, 400.0
    cfg = SimConfig(n_level1=1, n_level2=n, period="one_year", n_timepoints=1, mu2=(0.0,),
                    period_length_days=L, beta=(0.0, 0.0), n_invariant=1,
                    re_variance_scale=0.0, censor_rate_param=1e-12, seed=3)
    data, truth = gen_dataset(cfg)
    p = 1 - np.exp(-cfg.h0 * L)
    share = (truth.n_events > 0).mean()
    assert abs(share - p) < 3 * np.sqrt(p * (1 - p) / n)


def test_timepoints():
    _, truth = gen_dataset(SimConfig(period="three_year", seed=4, **DESK))
    t = truth.timepoints
    assert t[0] == 0 and len(t) == 12 and len(set(t)) == 12
    assert np.all(np.diff(t) > 0) and t[1] >= 12 and t[-1] <= 1100
    assert np.all(t == np.round(t))


@pytest.mark.parametrize("period", ["one_year", "three_year"])
def test_event_structure(period):
    cfg = SimConfig(period=period, seed=5, h0=np.exp(-6), washout_days=200, **DESK)
    data, truth = gen_dataset(cfg)
    ev = truth.event_times
    assert len(ev) == data.n_events
    for _, times in ev.groupby("level2")["time"]:
        assert np.all(np.diff(np.sort(times.to_numpy())) >= cfg.washout_days)
    assert (ev.groupby("level2").size() > 1).any()
    assert not np.isin(ev["time"], truth.timepoints).any()
    # rows split at the time points
    for g in truth.timepoints[1:]:
        assert not np.any((data.start < g) & (data.stop > g))
    np.testing.assert_array_equal(np.sort(data.stop[data.event]), np.sort(ev["time"]))


def test_bit_reproducible():
    a, _ = gen_dataset(SimConfig(seed=9, **DESK))
    b, _ = gen_dataset(SimConfig(seed=9, **DESK))
    c, _ = gen_dataset(SimConfig(seed=10, **DESK))
    pd.testing.assert_frame_equal(a.to_frame(), b.to_frame())
    assert not a.to_frame().equals(c.to_frame())


def test_program_effects_reused():
    _, t1 = gen_dataset(SimConfig(seed=1, **DESK))
    _, t2 = gen_dataset(SimConfig(seed=2, period="one_year", **DESK),
                        program_effects=t1.program_effects)
    pd.testing.assert_series_equal(t1.program_effects, t2.program_effects)


def test_uniform_program_assignment():
    _, truth = gen_dataset(SimConfig(n_level1=10, n_level2=20000, seed=6))
    counts = truth.assignment.value_counts()
    assert len(counts) == 10 and counts.min() > 1800 and counts.max() < 2200


def test_diagnostics_by_hand():
    d = Dataset(["A"] * 4, ["s1", "s2", "s2", "s3"], [0, 0, 800, 0], [5, 6, 900, 7],
                [1, 1, 1, 0], np.zeros((4, 0)), [])
    truth = SimTruth(np.r_[0.0], 0.0, 0.0, 0.0, pd.Series(dtype=float), pd.Series(dtype=float),
                     pd.Series(["A"] * 4, index=["s1", "s2", "s3", "s4"]), pd.DataFrame(),
                     pd.Series(dtype=float))
    # s3 and s4 have no events; s2 has two
    assert sim_diagnostics(d, truth) == (0.5, 0.25, 3)


def test_null_effects():
    ok = total = 0
    for r in range(50):
        cfg = SimConfig(period="one_year", beta=(0.0,) * 10, re_variance_scale=0.0,
                        seed=500 + r, **DESK)
        data, _ = gen_dataset(cfg)
        f = fit_cox(data)
        ok += int(np.sum(np.abs(f.beta_hat) < 2 * f.se))
        total += len(f.beta_hat)
    assert ok / total >= 0.9


def test_truth_serializes():
    _, truth = gen_dataset(SimConfig(seed=1, n_level1=3, n_level2=20))
    import json
    d = json.loads(truth.to_json())
    assert set(d["program_effects"]) == {"P001", "P002", "P003"}
    assert len(d["censor_times"]) == 20
