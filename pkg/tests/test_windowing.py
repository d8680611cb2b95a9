import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wdnleak.windowing import (
    BufferNotReady,
    CircularBuffer,
    NormStats,
    current_window,
    denormalize,
    fit_stats,
    normalize,
    push_sample,
    sliding_windows,
)


def fill(buf, start, stop):
    for n in range(start, stop):
        push_sample(buf, np.full(buf.n_nodes, float(n)))


def test_ready_only_after_l_pushes():
    buf = CircularBuffer(3, 336)
    fill(buf, 0, 335)
    assert not buf.ready
    with pytest.raises(BufferNotReady):
        current_window(buf)
    fill(buf, 335, 336)
    assert buf.ready


def test_ramp_input_columns():
    buf = CircularBuffer(2, 4)
    fill(buf, 0, 10)
    w = current_window(buf)
    np.testing.assert_array_equal(w.values, [[6, 7, 8, 9], [6, 7, 8, 9]])
    assert w.end_sample == 9
    assert w.start_sample == 6


def test_push_after_full_slides_by_one():
    buf = CircularBuffer(1, 5)
    fill(buf, 0, 5)
    before = current_window(buf)
    fill(buf, 5, 6)
    after = current_window(buf)
    assert after.end_sample == before.end_sample + 1
    np.testing.assert_array_equal(after.values[:, :-1], before.values[:, 1:])


def test_window_read_is_pure():
    buf = CircularBuffer(2, 3)
    fill(buf, 0, 7)
    a = current_window(buf).values
    b = current_window(buf).values
    np.testing.assert_array_equal(a, b)


def test_one_week_window_spans_seven_days():
    buf = CircularBuffer(1, 336)
    fill(buf, 0, 17520)
    w = current_window(buf)
    hours = (w.end_sample - w.start_sample + 1) * 0.5
    assert hours == 7 * 24


def test_push_rejects_bad_samples():
    buf = CircularBuffer(2, 3)
    with pytest.raises(ValueError):
        buf.push(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        buf.push(np.zeros(3))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), length=st.integers(1, 12), extra=st.integers(0, 30))
def test_buffer_matches_sliding_windows(seed, length, extra):
    series = np.random.default_rng(seed).normal(size=(3, length + extra))
    buf = CircularBuffer(3, length)
    views = sliding_windows(series, length)
    got = []
    for n in range(series.shape[1]):
        buf.push(series[:, n])
        if buf.ready:
            got.append(buf.window().values)
            assert buf.window().end_sample == buf.count - 1
    np.testing.assert_array_equal(np.stack(got), views)


def test_fit_stats_closed_form_moments():
    rng = np.random.default_rng(0)
    series = [np.vstack([5.0 + rng.standard_normal(20000), -3.0 + 2 * rng.standard_normal(20000)])]
    st_ = fit_stats(series)
    np.testing.assert_allclose(st_.mean, [5.0, -3.0], atol=0.05)
    np.testing.assert_allclose(st_.std, [1.0, 2.0], rtol=0.03)


def test_fit_stats_idempotent_on_standardised_data():
    rng = np.random.default_rng(1)
    series = [rng.normal(3, 2, size=(4, 500)) for _ in range(3)]
    s1 = fit_stats(series)
    s2 = fit_stats([normalize(s, s1) for s in series])
    np.testing.assert_allclose(s2.mean, 0, atol=1e-12)
    np.testing.assert_allclose(s2.std, 1, atol=1e-12)


def test_fit_stats_zero_variance_is_error():
    with pytest.raises(ValueError, match="zero-variance"):
        fit_stats([np.vstack([np.ones(10), np.arange(10.0)])])
    with pytest.raises(ValueError):
        fit_stats([])


def test_normalize_roundtrip_and_centering():
    stats = NormStats(np.array([10.0, -2.0]), np.array([2.0, 0.5]))
    means = np.repeat(stats.mean[:, None], 6, axis=1)
    np.testing.assert_array_equal(normalize(means, stats), 0)
    w = np.random.default_rng(2).normal(size=(2, 6)) * 10
    np.testing.assert_allclose(denormalize(normalize(w, stats), stats), w, rtol=1e-12)
    with pytest.raises(ValueError):
        normalize(np.zeros((3, 6)), stats)


def test_normalised_training_windows_have_unit_std():
    rng = np.random.default_rng(3)
    series = [rng.normal(40, 3, size=(3, 800)) for _ in range(2)]
    stats = fit_stats(series)
    pooled = np.concatenate([normalize(s, stats) for s in series], axis=1)
    np.testing.assert_allclose(pooled.std(axis=1), 1.0, atol=1e-6)
