"""Confusion metrics, top-mean summaries and confidence intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from hippofusion.errors import LabelError, MetricError, SeriesTooShortError, ShapeMismatchError
from hippofusion.models import ConfusionCounts, MetricReport, TopMeanReport

IntervalMethod = Literal["wald", "wilson"]

# positive class per classifier pair: the more severe diagnosis
POSITIVE_CLASS = {"AD-NC": "AD", "AD-MCI": "AD", "MCI-NC": "MCI"}


@dataclass
class MetricSeries:
    """Metric values indexed by optimizer iteration."""

    iterations: List[int] = field(default_factory=list)
    values: List[float] = field(default_factory=list)

    def append(self, iteration: int, value: float) -> None:
        if self.iterations and iteration <= self.iterations[-1]:
            raise MetricError(f"iteration {iteration} not after {self.iterations[-1]}")
        if not 0.0 <= value <= 1.0:
            raise MetricError(f"metric value {value} outside [0, 1]")
        self.iterations.append(iteration)
        self.values.append(float(value))

    def __len__(self) -> int:
        return len(self.values)


def confusion(predictions: Sequence[int], labels: Sequence[int], positive_class: int = 0) -> ConfusionCounts:
    preds = np.asarray(predictions)
    truth = np.asarray(labels)
    if preds.shape != truth.shape:
        raise ShapeMismatchError(
            f"{preds.shape[0] if preds.ndim else 0} predictions for {truth.shape[0] if truth.ndim else 0} labels",
            shape_a=preds.shape,
            shape_b=truth.shape,
        )
    if not np.all(np.isin(truth, (0, 1))) or not np.all(np.isin(preds, (0, 1))):
        raise LabelError("confusion counts need binary labels and predictions")
    pos_pred = preds == positive_class
    pos_true = truth == positive_class
    return ConfusionCounts(
        tp=int(np.sum(pos_pred & pos_true)),
        fp=int(np.sum(pos_pred & ~pos_true)),
        tn=int(np.sum(~pos_pred & ~pos_true)),
        fn=int(np.sum(~pos_pred & pos_true)),
    )


def acc_sen_spc(c: ConfusionCounts) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    """Accuracy, sensitivity, specificity; None where the denominator is zero."""
    acc = (c.tp + c.tn) / c.total if c.total else None
    sen = c.tp / (c.tp + c.fn) if c.tp + c.fn else None
    spc = c.tn / (c.tn + c.fp) if c.tn + c.fp else None
    return acc, sen, spc


def half_width(val: float, n: int, theta: float = 1.96, method: IntervalMethod = "wald") -> float:
    if n < 1:
        raise MetricError(f"confidence interval needs n >= 1, got {n}", n=n)
    if method == "wald":
        return theta * math.sqrt(val * (1.0 - val) / n)
    z2 = theta * theta
    return theta / (1.0 + z2 / n) * math.sqrt(val * (1.0 - val) / n + z2 / (4.0 * n * n))


def wilson_ci(val: float, n: int, theta: float = 1.96, method: IntervalMethod = "wald") -> Tuple[float, float]:
    """95% interval for a proportion, clamped to [0, 1].

    ``wald`` is val ± θ·√(val(1−val)/n); ``wilson`` is the Wilson score
    interval centred at (val + θ²/2n) / (1 + θ²/n).
    """
    if not 0.0 <= val <= 1.0:
        raise MetricError(f"proportion {val} outside [0, 1]")
    h = half_width(val, n, theta, method)
    if method == "wald":
        center = val
    else:
        z2 = theta * theta
        center = (val + z2 / (2.0 * n)) / (1.0 + z2 / n)
    return max(0.0, center - h), min(1.0, center + h)


def metric_report(val: Optional[float], n: int, theta: float = 1.96, method: IntervalMethod = "wald") -> MetricReport:
    if val is None:
        return MetricReport(value=None)
    low, high = wilson_ci(val, n, theta, method)
    return MetricReport(value=val, ci_low=low, ci_high=high, half_width=half_width(val, n, theta, method))


def top_mean(
    series: MetricSeries,
    s: int,
    n: int,
    theta: float = 1.96,
    method: IntervalMethod = "wald",
) -> TopMeanReport:
    """Best mean over sliding windows of ``s`` consecutive points.

    The earliest maximizing window wins. The variance is the population
    variance of that window; the interval uses ``n`` samples.
    """
    if s < 1:
        raise MetricError(f"window must be >= 1, got {s}")
    if len(series) < s:
        raise SeriesTooShortError(f"series of {len(series)} points is shorter than window {s}", length=len(series), window=s)
    values = np.asarray(series.values, dtype=np.float64)
    means = sliding_window_view(values, s).mean(axis=1)
    start = int(np.argmax(means))
    window = values[start:start + s]
    value = float(means[start])
    low, high = wilson_ci(value, n, theta, method)
    return TopMeanReport(
        value=value,
        variance=float(np.var(window)),
        window_start=series.iterations[start],
        window_length=s,
        ci_low=min(low, value),
        ci_high=max(high, value),
        half_width=half_width(value, n, theta, method),
        n=n,
        interval=method,
    )
