import json

import numpy as np
import pandas as pd
import pytest

from hierrisk import ValidationError, load_dataset
from hierrisk.cli import main
from hierrisk.pipeline import (PipelineConfig, emit_report, run_pipeline, run_simulation_study,
                               substream_seed)

SMALL = {"n_level1": 12, "n_level2": 600}


def small_config(tmp_path, **kw):
    d = {"mode": "simulate", "training": dict(SMALL), "m_blocks": [3, 4],
         "confidence_levels": [0.8, 0.9], "seed": 7, "output_dir": str(tmp_path / "out")}
    d.update(kw)
    return PipelineConfig.from_dict(d)


def test_bad_confidence_rejected():
    with pytest.raises(ValidationError, match="1.2"):
        PipelineConfig(confidence_levels=[1.2])


def test_unknown_key_rejected():
    with pytest.raises(ValidationError, match="bogus"):
        PipelineConfig.from_dict({"bogus": 1})


def test_substreams_distinct_and_stable():
    a = substream_seed(1, "blocks", 5)
    assert a == substream_seed(1, "blocks", 5)
    assert len({a, substream_seed(1, "blocks", 10), substream_seed(2, "blocks", 5)}) == 3


def test_pipeline_outputs(tmp_path):
    cfg = small_config(tmp_path)
    files = run_pipeline(cfg)
    out = tmp_path / "out"
    cov = pd.read_csv(files["coverage"])
    assert len(cov) == 4 and cov["coverage"].between(0, 1).all()
    np.testing.assert_allclose(cov["abs_cov_diff"], (cov["coverage"] - cov["confidence"]).abs())
    pred = pd.read_csv(files["predictions"], dtype={"level1": str})
    np.testing.assert_allclose(pred["total_variance"],
                               pred["poisson"] + pred["across_group"] + pred["mi"])
    assert (pred["ci_lo"] <= pred["expected_pooled"]).all()
    train = load_dataset(out / "training.csv")
    assert set(pred["level1"]) <= set(train.level1_labels)
    for name in ("histogram.csv", "spearman.json", "residuals.csv", "variance.csv",
                 "fits.json", "block_plans.json", "manifest.json", "predictions.json"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == cfg.hash()
    assert "blocks_m3" in manifest["seeds"]


def test_self_validation_is_calibrated(tmp_path):
    cfg = small_config(tmp_path, validation=False)
    files = run_pipeline(cfg)
    pred = pd.read_csv(files["predictions"])
    obs = pred["observed"].sum()
    assert abs(pred["expected_pooled"].sum() - obs) < 1e-6 * obs


def test_pipeline_is_deterministic(tmp_path):
    a = run_pipeline(small_config(tmp_path / "a"))
    b = run_pipeline(small_config(tmp_path / "b"))
    for key in ("predictions", "coverage", "variance", "histogram", "residuals"):
        assert a[key].read_bytes() == b[key].read_bytes()


def test_loo_estimator(tmp_path):
    files = run_pipeline(small_config(tmp_path, variance_estimator="loo_jackknife"))
    assert set(pd.read_csv(files["coverage"])["m"]) == {"loo"}


def test_validation_cutoff_truncates(tmp_path):
    full = run_pipeline(small_config(tmp_path / "f"))
    part = run_pipeline(small_config(tmp_path / "p", validation_cutoff_day=100))
    e_full = pd.read_csv(full["predictions"])["expected_pooled"].sum()
    e_part = pd.read_csv(part["predictions"])["expected_pooled"].sum()
    assert e_part < e_full


def test_failure_record(tmp_path):
    cfg = small_config(tmp_path, mode="analyze", training=str(tmp_path / "missing.csv"))
    with pytest.raises(FileNotFoundError):
        run_pipeline(cfg)
    rec = json.loads((tmp_path / "out" / "failure.json").read_text())
    assert rec["stage"] == "data"


def test_study_single_replicate_equals_coverage(tmp_path):
    cfg = small_config(tmp_path, study_periods=["one_year"], m_blocks=[3])
    rep = run_simulation_study(cfg, replicates=1)
    merged = rep.summary.merge(rep.coverage, on=["period", "validation", "normalization", "m",
                                                 "confidence"])
    np.testing.assert_array_equal(merged["meanCoverage"], merged["coverage"])
    assert set(rep.coefficients["model"]) == {"cox", "frailty"}


def test_emit_report_flags():
    frame = pd.DataFrame({"level1": ["A", "B", "C"], "observed": [5, 9, 1],
                          "expected_pooled": [4.0, 4.0, 4.0], "ci_lo": [2.0, 2.0, 2.0],
                          "ci_hi": [5.0, 6.0, 6.0]})
    text, table = emit_report(frame)
    assert list(table["flag"]) == ["within", "above", "below"]
    assert "above: 1" in text


# -- command line -----------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    d = tmp_path
    assert main(["simulate", "--n-level1", "8", "--n-level2", "400", "--period", "one_year",
                 "--seed", "1", "--out", str(d / "train.csv"), "--truth",
                 str(d / "truth.json")]) == 0
    assert "censoring rate" in capsys.readouterr().out
    assert main(["fit", str(d / "train.csv"), "--out", str(d / "fit.json")]) == 0
    assert json.loads((d / "fit.json").read_text())["covariate_names"][0] == "z1_1"
    assert main(["fit", str(d / "train.csv"), "--cox-only", "--robust", "level1",
                 "--out", str(d / "cox.json")]) == 0
    assert main(["predict", "--train", str(d / "train.csv"), "--out", str(d / "pred.csv")]) == 0
    pred = pd.read_csv(d / "pred.csv")
    assert pred["expected"].sum() == pytest.approx(pred["observed"].sum(), rel=1e-6)
    cfg = {"mode": "analyze", "training": str(d / "train.csv"), "m_blocks": [4],
           "confidence_levels": [0.9], "output_dir": str(d / "run")}
    (d / "cfg.json").write_text(json.dumps(cfg))
    assert main(["validate", "--config", str(d / "cfg.json")]) == 0
    assert main(["report", str(d / "run"), "--out", str(d / "flags.csv")]) == 0
    assert set(pd.read_csv(d / "flags.csv")["flag"]) <= {"below", "within", "above"}


def test_cli_ingest(tmp_path):
    rows = [("A", "s1", day, int(day == 900)) for day in range(0, 1500, 100)]
    pd.DataFrame(rows, columns=["level1", "level2", "day", "infection"]).to_csv(
        tmp_path / "enc.csv", index=False)
    assert main(["ingest", str(tmp_path / "enc.csv"), "--out", str(tmp_path / "iv.csv")]) == 0
    data = load_dataset(tmp_path / "iv.csv")
    assert data.start.min() == 0 and data.n_events == 1


def test_cli_select(tmp_path):
    from conftest import signal_noise_stack
    from hierrisk import write_dataset
    stack = signal_noise_stack(2, M=2, n_subjects=600)
    for l, c in enumerate(stack, start=1):
        write_dataset(c, tmp_path / f"c{l}.csv")
    assert main(["select", "--pattern", str(tmp_path / "c{}.csv"), "--M", "2", "--cox-only",
                 "--out", str(tmp_path / "trace.json")]) == 0
    trace = json.loads((tmp_path / "trace.json").read_text())
    assert trace["initial"][0] == "s1"


def test_cli_exit_codes(tmp_path):
    assert main(["fit", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "x")]) == 1
    (tmp_path / "bad.json").write_text(json.dumps({"confidence_levels": [1.2]}))
    assert main(["validate", "--config", str(tmp_path / "bad.json")]) == 1
    # a column that is constant within every copy makes the fits fail mid-selection
    d = pd.DataFrame({"level1": ["A", "A", "B", "B"], "level2": ["s1", "s2", "s3", "s4"],
                      "start": 0, "stop": [1, 2, 3, 4], "event": [1, 0, 1, 0], "c": 1.0})
    for l in (1, 2):
        d.to_csv(tmp_path / f"k{l}.csv", index=False)
    assert main(["select", "--pattern", str(tmp_path / "k{}.csv"), "--M", "2", "--cox-only",
                 "--out", str(tmp_path / "t.json")]) == 2
    assert main(["no-such-command"]) == 1


def test_cli_study_is_byte_identical(tmp_path):
    cfg = {"mode": "simulate", "training": SMALL, "m_blocks": [3],
           "confidence_levels": [0.9], "study_periods": ["one_year"], "seed": 3}
    (tmp_path / "s.json").write_text(json.dumps(cfg))
    for name in ("a", "b"):
        assert main(["study", "--config", str(tmp_path / "s.json"), "--replicates", "2",
                     "--output-dir", str(tmp_path / name)]) == 0
    for f in ("study_summary.csv", "study_coverage.csv", "study_coefficients.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
