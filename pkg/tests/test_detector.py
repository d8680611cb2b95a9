import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wdnleak import ocsvm
from wdnleak.autoencoder import Autoencoder
from wdnleak.detector import (
    CalibrationError,
    DetectorConfig,
    LeakDetector,
    adapt_node_count,
    calibrate_threshold,
    classify,
    fpr_curve,
    leak_start,
    realized_fpr,
    run_pipeline,
    smooth,
)
from wdnleak.nn import ShapeError
from wdnleak.scenario import LeakSpec, Scenario
from wdnleak.windowing import NormStats, sliding_windows


def test_smooth_identity_and_constant():
    x = np.random.default_rng(0).normal(size=50)
    np.testing.assert_array_equal(smooth(x, 1), x)
    np.testing.assert_allclose(smooth(np.full(30, 2.5), 7), 2.5)


def test_smooth_impulse_plateau():
    x = np.zeros(12)
    x[3] = 1.0
    np.testing.assert_allclose(smooth(x, 4), [0, 0, 0, 0.25, 0.25, 0.25, 0.25, 0, 0, 0, 0, 0])


def test_smooth_ramp_in_uses_prefix_mean():
    np.testing.assert_allclose(smooth([2.0, 4.0, 6.0, 8.0], 3), [2.0, 3.0, 4.0, 6.0])


def test_smooth_errors():
    with pytest.raises(ValueError):
        smooth([], 3)
    with pytest.raises(ValueError):
        smooth([1.0], 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), length=st.integers(1, 20), cut=st.integers(1, 60))
def test_smooth_is_causal(seed, length, cut):
    x = np.random.default_rng(seed).normal(size=60)
    y = x.copy()
    y[cut:] += 100.0
    np.testing.assert_array_equal(smooth(x, length)[:cut], smooth(y, length)[:cut])


def test_uniform_quantile_threshold():
    pool = np.random.default_rng(1).uniform(size=200_000)
    assert calibrate_threshold([pool], 0.10, "sample") == pytest.approx(0.90, abs=0.005)


def test_quantile_uses_linear_interpolation():
    assert calibrate_threshold([np.array([0.0, 1.0, 2.0, 3.0, 4.0])], 0.10, "sample") == pytest.approx(3.6)


def test_scenario_mode_uses_trace_maxima():
    traces = [np.array([0.0, float(i)]) for i in range(11)]
    assert calibrate_threshold(traces, 0.10, "scenario") == pytest.approx(9.0)
    assert realized_fpr(traces, 9.0, "scenario") == pytest.approx(2 / 11)


def test_calibration_errors():
    with pytest.raises(CalibrationError):
        calibrate_threshold([np.ones(5)], 1.0)
    with pytest.raises(CalibrationError):
        calibrate_threshold([np.ones(5)], 0.0)
    with pytest.raises(CalibrationError):
        calibrate_threshold([], 0.1)
    with pytest.raises(ValueError):
        DetectorConfig(target_fpr=1.0)
    with pytest.raises(ValueError):
        DetectorConfig(smoothing=0)


def test_fpr_curve_threshold_non_increasing():
    traces = [np.random.default_rng(i).normal(size=300) for i in range(5)]
    curve = fpr_curve(traces, [0.01, 0.05, 0.1, 0.2, 0.5])
    gammas = [g for _, g in curve]
    assert all(a >= b for a, b in zip(gammas, gammas[1:]))


def test_classify_inclusive_boundary():
    np.testing.assert_array_equal(classify(np.array([0.1, 0.5, 0.7]), 0.5), [0, 1, 1])
    assert not classify(np.array([0.1, 0.2]), 0.5).any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), g1=st.floats(-2, 2), g2=st.floats(-2, 2))
def test_alarm_sets_shrink_with_threshold(seed, g1, g2):
    lo, hi = sorted((g1, g2))
    s = np.random.default_rng(seed).normal(size=100)
    a_lo, a_hi = classify(s, lo).astype(bool), classify(s, hi).astype(bool)
    assert np.all(a_lo[a_hi])
    n_lo, _ = leak_start(a_lo)
    n_hi, _ = leak_start(a_hi)
    if n_hi is not None:
        assert n_lo is not None and n_lo <= n_hi


def test_leak_start_examples():
    alarms = np.zeros(100, dtype=int)
    alarms[80] = 1
    assert leak_start(alarms, 0.5) == (80, 40.0)
    assert leak_start(np.zeros(10), 0.5) == (None, None)
    alarms = np.zeros(100, dtype=int)
    alarms[[50, 51, 90]] = 1
    assert leak_start(alarms)[0] == 50
    assert leak_start(alarms, 0.5, first_sample=335)[0] == 385


def test_adapt_node_count():
    w = np.random.default_rng(0).normal(size=(5, 7))
    assert adapt_node_count(w, 5) is w
    two = np.arange(2)[:, None] * np.ones((1, 3))
    np.testing.assert_array_equal(adapt_node_count(two, 5)[:, 0], [0, 1, 0, 1, 0])
    hanoi = np.zeros((31, 336))
    assert adapt_node_count(hanoi, 268).shape == (268, 336)
    with pytest.raises(ValueError):
        adapt_node_count(w, 4)


def tiny_detector(k=3, length=16, seed=0):
    rng = np.random.default_rng(seed)
    ae = Autoencoder(k, length, seed=seed)
    train = rng.normal(size=(k, 300))
    windows = np.ascontiguousarray(sliding_windows(train, length, 2))
    svm = ocsvm.fit(ae.encode(windows), nu=0.2, seed=seed)
    return LeakDetector(ae, svm, NormStats.identity(k))


def test_pipeline_matches_batch_scoring():
    det = tiny_detector()
    x = np.random.default_rng(1).normal(size=(3, 60))
    samples, raw = det.raw_scores(x, batch_size=7)
    assert samples[0] == 15 and samples[-1] == 59
    ref = det.svm.score(det.autoencoder.encode(np.ascontiguousarray(sliding_windows(x, 16))))
    np.testing.assert_array_equal(raw, ref)


def test_threshold_above_max_means_no_alarm():
    det = tiny_detector()
    s = Scenario("n", np.random.default_rng(2).normal(size=(3, 80)), 0)
    res = run_pipeline(s, det, DetectorConfig(smoothing=4, threshold=math.inf))
    assert res.decision == 0 and res.first_alarm_sample is None and res.first_alarm_time is None
    top = res.trace.smoothed.max()
    res = run_pipeline(s, det, DetectorConfig(smoothing=4, threshold=top))
    assert res.decision == 1
    assert res.first_alarm_time == res.first_alarm_sample * 0.5


def test_pipeline_deterministic_and_causal():
    det = tiny_detector()
    x = np.random.default_rng(3).normal(size=(3, 90))
    cfg = DetectorConfig(smoothing=5, threshold=0.0)
    a = run_pipeline(Scenario("a", x, 0), det, cfg)
    b = run_pipeline(Scenario("a", x, 0), det, cfg)
    assert a.record() == b.record()
    np.testing.assert_array_equal(a.trace.smoothed, b.trace.smoothed)
    y = x.copy()
    y[:, 50:] += 5.0
    c = run_pipeline(Scenario("c", y, 0), det, cfg)
    # scores up to the window ending at sample 49 cannot see the change
    n = 50 - 15
    np.testing.assert_array_equal(c.trace.smoothed[:n], a.trace.smoothed[:n])


def test_pipeline_node_mismatch_needs_adaptation():
    det = tiny_detector(k=4)
    s = Scenario("f", np.random.default_rng(4).normal(size=(2, 40)), 0)
    with pytest.raises(ShapeError):
        run_pipeline(s, det, DetectorConfig(threshold=0.0))
    res = run_pipeline(s, det, DetectorConfig(threshold=0.0, adapt_nodes=True))
    assert res.metadata["adapted_from_nodes"] == 2


def test_pipeline_requires_threshold_and_full_window():
    det = tiny_detector()
    with pytest.raises(CalibrationError):
        run_pipeline(Scenario("x", np.zeros((3, 40)), 0), det, DetectorConfig())
    with pytest.raises(ValueError):
        run_pipeline(Scenario("x", np.zeros((3, 10)), 0), det, DetectorConfig(threshold=1.0))


def test_result_record_carries_onset():
    det = tiny_detector()
    s = Scenario("l", np.random.default_rng(5).normal(size=(3, 60)), 0, LeakSpec(0, 0.5, 30))
    rec = run_pipeline(s, det, DetectorConfig(threshold=0.0)).record()
    assert rec["onset_sample"] == 30 and rec["label"] == 1
