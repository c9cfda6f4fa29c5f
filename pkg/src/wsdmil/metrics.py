"""Evaluation metrics and significance machinery.

Confusion-matrix metrics follow the standard definitions: balanced accuracy
is macro-averaged recall, weighted F1 is support-weighted per-class F1, and
per-class accuracy is per-class recall.  Classes with zero support are left
out of macro averages.  Significance between two systems comes from a paired
sign-flip permutation test, and uncertainty from a percentile bootstrap over
slides.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "MetricReport",
    "BootstrapResult",
    "confusion",
    "balanced_accuracy",
    "weighted_f1",
    "per_class_accuracy",
    "compute_report",
    "paired_permutation_test",
    "bootstrap_ci",
]

N_CLASSES = 4

PERMUTATION_STATISTICS = ("balanced_accuracy_diff", "accuracy_diff")


def confusion(y_true, y_pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """Count matrix M[i, j] = slides of true class i predicted as class j."""
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1 or t.size == 0:
        raise ValueError(f"labels must be equal-length 1-D and non-empty, "
                         f"got {t.shape} and {p.shape}")
    if t.min() < 0 or t.max() >= n_classes or p.min() < 0 or p.max() >= n_classes:
        raise ValueError(f"labels outside 0..{n_classes - 1}")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


def balanced_accuracy(m: np.ndarray) -> float:
    """Mean per-class recall over classes that appear in the truth."""
    m = np.asarray(m)
    support = m.sum(axis=1)
    present = support > 0
    if not present.any():
        raise ValueError("confusion matrix has no samples")
    recall = np.diag(m)[present] / support[present]
    return float(recall.mean())


def weighted_f1(m: np.ndarray) -> float:
    """Support-weighted mean of per-class F1 (F1 = 0 where P + R = 0)."""
    m = np.asarray(m)
    support = m.sum(axis=1)
    if support.sum() == 0:
        raise ValueError("confusion matrix has no samples")
    predicted = m.sum(axis=0)
    tp = np.diag(m).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2.0 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)
    return float((support * f1).sum() / support.sum())


def per_class_accuracy(m: np.ndarray) -> list[float | None]:
    """Per-class recall; None marks classes absent from the truth."""
    m = np.asarray(m)
    support = m.sum(axis=1)
    return [float(m[i, i] / support[i]) if support[i] > 0 else None
            for i in range(m.shape[0])]


@dataclass
class MetricReport:
    """Headline metrics for one evaluated slide set."""

    balanced_accuracy: float
    weighted_f1: float
    per_class_accuracy: list[float | None]
    n: int
    ci_balanced_accuracy: tuple[float, float] | None = None
    ci_weighted_f1: tuple[float, float] | None = None
    p_value: float | None = None


def compute_report(y_true, y_pred) -> MetricReport:
    m = confusion(y_true, y_pred)
    return MetricReport(balanced_accuracy=balanced_accuracy(m),
                        weighted_f1=weighted_f1(m),
                        per_class_accuracy=per_class_accuracy(m),
                        n=int(m.sum()))


def _stat_rows(a: np.ndarray, b: np.ndarray, masks: list[np.ndarray] | None) -> np.ndarray:
    """Statistic per row pair: plain accuracy diff, or macro recall diff
    when per-class index masks are given."""
    if masks is None:
        return (a - b).mean(axis=1)
    acc = np.zeros(a.shape[0])
    for mask in masks:
        acc += a[:, mask].mean(axis=1) - b[:, mask].mean(axis=1)
    return acc / len(masks)


def paired_permutation_test(correct_a, correct_b, y_true=None,
                            statistic: str = "balanced_accuracy_diff",
                            n_permutations: int = 10_000,
                            seed: int = 0) -> float:
    """Two-sided paired permutation p-value for system A vs system B.

    Inputs are per-slide 0/1 correctness vectors aligned on the same slides.
    Each permutation swaps A and B outcomes per slide with a fair coin; the
    p-value is (1 + #{|T_perm| >= |T_obs|}) / (1 + n_permutations).
    """
    a = np.asarray(correct_a, dtype=np.float64)
    b = np.asarray(correct_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError(f"correctness vectors must be equal-length 1-D, "
                         f"got {a.shape} and {b.shape}")
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    if statistic not in PERMUTATION_STATISTICS:
        raise ValueError(f"unknown statistic {statistic!r}, "
                         f"expected one of {PERMUTATION_STATISTICS}")
    masks = None
    if statistic == "balanced_accuracy_diff":
        if y_true is None:
            raise ValueError("balanced_accuracy_diff needs y_true to group slides")
        t = np.asarray(y_true, dtype=np.int64)
        if t.shape != a.shape:
            raise ValueError(f"y_true shape {t.shape} does not match {a.shape}")
        masks = [np.flatnonzero(t == c) for c in np.unique(t)]

    t_obs = abs(float(_stat_rows(a[None, :], b[None, :], masks)[0]))
    rng = np.random.default_rng(seed)
    n = a.size
    exceed = 0
    done = 0
    while done < n_permutations:
        m = min(20_000, n_permutations - done)
        flips = rng.random((m, n)) < 0.5
        a_perm = np.where(flips, b, a)
        b_perm = np.where(flips, a, b)
        t_perm = _stat_rows(a_perm, b_perm, masks)
        # tiny slack so ties of equal magnitude count despite rounding
        exceed += int((np.abs(t_perm) >= t_obs - 1e-12).sum())
        done += m
    return (1 + exceed) / (1 + n_permutations)


@dataclass
class BootstrapResult:
    """Percentile bootstrap interval around a point estimate."""

    point: float
    low: float
    high: float
    n_skipped: int = 0

    def offsets(self) -> tuple[float, float]:
        """Signed distances from the point estimate, (negative, positive)."""
        return (self.low - self.point, self.high - self.point)


def bootstrap_ci(records: Sequence, metric: Callable[[list], float],
                 n_resamples: int = 1000, level: float = 0.95,
                 seed: int = 0) -> BootstrapResult:
    """Resample slides with replacement and take percentile bounds of the
    metric.  Resamples where the metric is undefined (raises ValueError or
    ZeroDivisionError) are skipped and counted, with a warning past 1%.
    """
    records = list(records)
    if not records:
        raise ValueError("bootstrap needs at least one record")
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    point = float(metric(records))
    rng = np.random.default_rng(seed)
    n = len(records)
    stats = []
    skipped = 0
    for _ in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        sample = [records[j] for j in idx]
        try:
            stats.append(float(metric(sample)))
        except (ValueError, ZeroDivisionError):
            skipped += 1
    if not stats:
        raise ValueError("metric undefined on every bootstrap resample")
    if skipped > 0.01 * n_resamples:
        warnings.warn(f"bootstrap skipped {skipped}/{n_resamples} resamples "
                      f"with undefined metric")
    tail = 100.0 * (1.0 - level) / 2.0
    low, high = np.percentile(stats, [tail, 100.0 - tail])
    return BootstrapResult(point=point, low=float(low), high=float(high),
                           n_skipped=skipped)
