"""Classification and coverage-group fairness metrics.

Undefined values (a zero denominator) are returned as ``None`` and printed as
``"n/a"``; they are never silently turned into 0 or NaN. Parity with exactly
one zero group rate is ``math.inf``.

Sign convention for the group gaps: ``delta = rate(low) - rate(high)``, so a
negative value means the high-coverage group has the higher rate.
"""

from __future__ import annotations

import math
import statistics
import warnings
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .tiles import DEFAULT_COVERAGE_SPLIT

DEFAULT_THRESHOLD = 0.5

Metric = Optional[float]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class GroupRates:
    fpr_low: Metric
    fpr_high: Metric
    tpr_low: Metric
    tpr_high: Metric


def _ratio(num: int, den: int) -> Metric:
    return num / den if den else None


def _as_arrays(scores, labels=None):
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1:
        raise ValueError("scores must be one-dimensional")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    if labels is None:
        return s
    y = np.asarray(labels)
    if y.shape != s.shape:
        raise ValueError(f"length mismatch: {s.shape[0]} scores vs {y.shape[0] if y.ndim else 0} labels")
    if y.size and not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(bool)


def predict(scores, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Flag = score >= threshold."""
    return _as_arrays(scores) >= threshold


def confusion(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> ConfusionCounts:
    s, y = _as_arrays(scores, labels)
    p = s >= threshold
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & y)),
        fp=int(np.count_nonzero(p & ~y)),
        tn=int(np.count_nonzero(~p & ~y)),
        fn=int(np.count_nonzero(~p & y)),
    )


def true_positive_rate(c: ConfusionCounts) -> Metric:
    return _ratio(c.tp, c.tp + c.fn)


def false_positive_rate(c: ConfusionCounts) -> Metric:
    return _ratio(c.fp, c.fp + c.tn)


def recall(c: ConfusionCounts) -> Metric:
    return true_positive_rate(c)


def precision(c: ConfusionCounts) -> Metric:
    return _ratio(c.tp, c.tp + c.fp)


def balanced_accuracy(c: ConfusionCounts) -> Metric:
    tpr = _ratio(c.tp, c.tp + c.fn)
    tnr = _ratio(c.tn, c.tn + c.fp)
    if tpr is None or tnr is None:
        return None
    return (tpr + tnr) / 2


def group_rates(
    scores, labels, coverages, threshold: float = DEFAULT_THRESHOLD, split: float = DEFAULT_COVERAGE_SPLIT
) -> GroupRates:
    s, y = _as_arrays(scores, labels)
    cov = np.asarray(coverages, dtype=float)
    if cov.shape != s.shape:
        raise ValueError("coverages and scores differ in length")
    high = cov >= split
    lo = confusion(s[~high], y[~high], threshold)
    hi = confusion(s[high], y[high], threshold)
    return GroupRates(
        fpr_low=false_positive_rate(lo),
        fpr_high=false_positive_rate(hi),
        tpr_low=true_positive_rate(lo),
        tpr_high=true_positive_rate(hi),
    )


def _diff(a: Metric, b: Metric) -> Metric:
    return None if a is None or b is None else a - b


def delta_rates(
    scores, labels, coverages, threshold: float = DEFAULT_THRESHOLD, split: float = DEFAULT_COVERAGE_SPLIT
) -> tuple[Metric, Metric]:
    """Return (FPR_low - FPR_high, TPR_low - TPR_high)."""
    g = group_rates(scores, labels, coverages, threshold, split)
    return _diff(g.fpr_low, g.fpr_high), _diff(g.tpr_low, g.tpr_high)


def flag_rates(
    scores, coverages, threshold: float = DEFAULT_THRESHOLD, split: float = DEFAULT_COVERAGE_SPLIT
) -> tuple[Metric, Metric]:
    """Flagged fraction in the (low, high) coverage groups; labels not needed."""
    s = _as_arrays(scores)
    cov = np.asarray(coverages, dtype=float)
    if cov.shape != s.shape:
        raise ValueError("coverages and scores differ in length")
    high = cov >= split
    flagged = s >= threshold
    return (
        _ratio(int(np.count_nonzero(flagged & ~high)), int(np.count_nonzero(~high))),
        _ratio(int(np.count_nonzero(flagged & high)), int(np.count_nonzero(high))),
    )


def parity(
    scores, coverages, threshold: float = DEFAULT_THRESHOLD, split: float = DEFAULT_COVERAGE_SPLIT
) -> Metric:
    """max(r_low, r_high) / min(r_low, r_high) over group flag rates.

    1 is perfect parity. ``None`` if a group is empty or both rates are 0,
    ``math.inf`` if exactly one rate is 0.
    """
    r_low, r_high = flag_rates(scores, coverages, threshold, split)
    if r_low is None or r_high is None:
        return None
    lo, hi = min(r_low, r_high), max(r_low, r_high)
    if hi == 0:
        return None
    if lo == 0:
        return math.inf
    return hi / lo


def count_flags(scores, threshold: float = DEFAULT_THRESHOLD) -> int:
    return int(np.count_nonzero(_as_arrays(scores) >= threshold))


class SingleSeedWarning(UserWarning):
    pass


def aggregate_seeds(values: Iterable[Metric]) -> tuple[Metric, Metric]:
    """Mean and sample standard deviation (n - 1) over per-seed values.

    Undefined entries are skipped. One defined value gives std 0.0 with a
    :class:`SingleSeedWarning`. An infinite value makes the mean infinite
    and the std undefined.
    """
    vals = list(values)
    if not vals:
        raise ValueError("aggregate_seeds needs at least one value")
    defined = [float(v) for v in vals if v is not None]
    if not defined:
        return None, None
    if any(math.isinf(v) for v in defined):
        return math.inf, None
    mean = math.fsum(defined) / len(defined)
    if len(defined) == 1:
        warnings.warn("only one seed; std reported as 0.0", SingleSeedWarning, stacklevel=2)
        return mean, 0.0
    return mean, statistics.stdev(defined)


@dataclass(frozen=True)
class FairnessReport:
    bacc: tuple[Metric, Metric]
    precision: tuple[Metric, Metric]
    recall: tuple[Metric, Metric]
    delta_fpr: tuple[Metric, Metric]
    delta_tpr: tuple[Metric, Metric]
    parity: tuple[Metric, Metric]
    flags: int | None


def fmt(value: Metric) -> str:
    """Report formatting: ``n/a`` for undefined, ``repr`` otherwise."""
    if value is None:
        return "n/a"
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)


def seed_metrics(
    test_scores: Sequence[float],
    test_labels: Sequence[int],
    test_coverages: Sequence[float],
    deploy_scores: Sequence[float],
    deploy_coverages: Sequence[float],
    threshold: float = DEFAULT_THRESHOLD,
    split: float = DEFAULT_COVERAGE_SPLIT,
) -> dict[str, Metric]:
    """All per-seed scalars behind one report row."""
    c = confusion(test_scores, test_labels, threshold)
    dfpr, dtpr = delta_rates(test_scores, test_labels, test_coverages, threshold, split)
    return {
        "bacc": balanced_accuracy(c),
        "precision": precision(c),
        "recall": recall(c),
        "dfpr": dfpr,
        "dtpr": dtpr,
        "parity": parity(deploy_scores, deploy_coverages, threshold, split),
        "flags": float(count_flags(deploy_scores, threshold)),
    }
