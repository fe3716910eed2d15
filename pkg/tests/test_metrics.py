import math

import numpy as np
import pytest

from hippofusion.errors import LabelError, MetricError, SeriesTooShortError, ShapeMismatchError
from hippofusion.metrics import (
    MetricSeries,
    acc_sen_spc,
    confusion,
    half_width,
    metric_report,
    top_mean,
    wilson_ci,
)
from hippofusion.models import ConfusionCounts


def series_of(values, step=10):
    series = MetricSeries()
    for i, v in enumerate(values):
        series.append(i * step, v)
    return series


def test_confusion_with_positive_class_zero():
    counts = confusion([0, 0, 1, 1, 0], [0, 1, 1, 0, 0], positive_class=0)
    assert counts == ConfusionCounts(tp=2, fp=1, tn=1, fn=1)
    assert counts.total == 5


def test_confusion_rejects_mismatched_lengths_and_labels():
    with pytest.raises(ShapeMismatchError):
        confusion([0, 1], [0, 1, 1])
    with pytest.raises(LabelError):
        confusion([0, 2], [0, 1])


def test_balanced_accuracy_is_mean_of_sensitivity_and_specificity():
    counts = ConfusionCounts(tp=90, fn=30, tn=105, fp=15)
    acc, sen, spc = acc_sen_spc(counts)
    assert acc == pytest.approx((sen + spc) / 2)
    assert sen == 0.75 and spc == 0.875


def test_undefined_metrics_are_none():
    acc, sen, spc = acc_sen_spc(ConfusionCounts(tn=3, fp=1))
    assert sen is None
    assert spc == 0.75
    assert acc == 0.75
    assert acc_sen_spc(ConfusionCounts()) == (None, None, None)
    assert metric_report(None, 10).half_width is None


def test_half_width_at_half_with_100_samples():
    assert half_width(0.5, 100) == pytest.approx(0.098, abs=1e-12)
    assert wilson_ci(0.5, 100) == pytest.approx((0.402, 0.598), abs=1e-12)


def test_interval_is_clamped_to_unit_range():
    low, high = wilson_ci(0.99, 10)
    assert high == 1.0
    assert 0.0 < low < 0.99
    assert wilson_ci(1.0, 10) == (1.0, 1.0)


def test_wilson_score_interval():
    z = 1.96
    n, p = 40, 0.8
    center = (p + z * z / (2 * n)) / (1 + z * z / n)
    h = z / (1 + z * z / n) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    low, high = wilson_ci(p, n, method="wilson")
    assert low == pytest.approx(center - h)
    assert high == pytest.approx(center + h)
    low, high = wilson_ci(1.0, n, method="wilson")
    assert high == pytest.approx(1.0)
    assert low < 1.0


def test_interval_needs_samples():
    with pytest.raises(MetricError):
        half_width(0.5, 0)
    with pytest.raises(MetricError):
        wilson_ci(1.5, 10)


def test_top_mean_picks_earliest_best_window():
    series = series_of([0.7, 0.8, 0.9, 0.8, 0.7])
    report = top_mean(series, 2, n=100)
    assert report.value == pytest.approx(0.85)
    assert report.window_start == 10
    assert report.variance == pytest.approx(0.0025)
    assert report.window_length == 2
    assert report.ci_low <= report.value <= report.ci_high


def test_top_mean_of_constant_series():
    report = top_mean(series_of([0.6] * 5), 3, n=50)
    assert report.value == pytest.approx(0.6)
    assert report.variance == pytest.approx(0.0, abs=1e-15)
    assert report.window_start == 0


def test_top_mean_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        length = int(rng.integers(1, 30))
        s = int(rng.integers(1, length + 1))
        values = rng.random(length)
        best, best_start = -1.0, None
        for start in range(length - s + 1):
            mean = sum(values[start:start + s]) / s
            if mean > best + 1e-12:
                best, best_start = mean, start
        report = top_mean(series_of(values, step=1), s, n=100)
        assert report.value == pytest.approx(best, abs=1e-12)
        assert report.window_start == best_start


def test_top_mean_rejects_short_series():
    with pytest.raises(SeriesTooShortError):
        top_mean(series_of([0.5, 0.6]), 3, n=10)
    with pytest.raises(MetricError):
        top_mean(series_of([0.5]), 0, n=10)


def test_series_rejects_out_of_order_and_out_of_range():
    series = MetricSeries()
    series.append(0, 0.5)
    with pytest.raises(MetricError):
        series.append(0, 0.6)
    with pytest.raises(MetricError):
        series.append(5, 1.2)
