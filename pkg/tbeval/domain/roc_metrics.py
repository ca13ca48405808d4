"""Empirical ROC analysis, thresholding and bootstrap confidence intervals"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from .errors import DegenerateDataError
from .models import (
    BootstrapConfig,
    Cohort,
    ConfidenceInterval,
    PerformancePoint,
    RocCurve,
    RocPoint,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CaseSlice:
    """Parallel per-case arrays: model scores, binary labels and optional extra columns"""

    scores: np.ndarray
    labels: np.ndarray
    extra: Optional[np.ndarray] = None

    @classmethod
    def of(cls, scores: Any, labels: Any, extra: Any = None) -> "CaseSlice":
        scores = np.asarray(scores, dtype=float)
        labels = np.asarray(labels, dtype=int)
        if scores.shape != labels.shape or scores.ndim != 1:
            raise ValueError("scores and labels must be 1-d arrays of equal length")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        if extra is not None:
            extra = np.asarray(extra)
            if extra.shape[0] != scores.shape[0]:
                raise ValueError("extra columns must have one row per case")
        return cls(scores, labels, extra)

    @classmethod
    def from_cohort(cls, cohort: Cohort) -> "CaseSlice":
        return cls.of(cohort.scores(), cohort.labels())

    def __len__(self) -> int:
        return int(self.scores.shape[0])

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return len(self) - self.n_pos

    def take(self, index: np.ndarray) -> "CaseSlice":
        extra = None if self.extra is None else self.extra[index]
        return CaseSlice(self.scores[index], self.labels[index], extra)


def require_both_classes(labels: np.ndarray) -> Tuple[int, int]:
    n_pos = int(labels.sum())
    n_neg = int(labels.shape[0] - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDataError("degenerate labels: need at least one positive and one negative")
    return n_pos, n_neg


def threshold_table(scores: Any, labels: Any) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct thresholds (descending) with cumulative true and false positive counts.

    The first row is a sentinel just above the maximum score, where nothing is
    called positive. Each further row classifies positive iff score >= threshold.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    block_ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tps = np.cumsum(y)[block_ends]
    fps = block_ends + 1 - tps
    sentinel = np.nextafter(s[0], np.inf)
    return np.r_[sentinel, s[block_ends]], np.r_[0, tps], np.r_[0, fps]


def roc_curve(scores: Any, labels: Any) -> RocCurve:
    """Empirical ROC curve; tied scores give a single (diagonal) step"""
    data = CaseSlice.of(scores, labels)
    n_pos, n_neg = require_both_classes(data.labels)
    thresholds, tps, fps = threshold_table(data.scores, data.labels)
    points = [
        RocPoint(fpr=fp / n_neg, tpr=tp / n_pos, threshold=float(t))
        for t, tp, fp in zip(thresholds, tps, fps)
    ]
    return RocCurve(points=points, n_pos=n_pos, n_neg=n_neg)


def _trapezoid(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve"""
    fpr, tpr, _ = curve.arrays()
    return _trapezoid(fpr, tpr)


def auc_score(scores: Any, labels: Any) -> float:
    """AUC straight from scores and labels, without building the curve model"""
    labels = np.asarray(labels, dtype=int)
    n_pos, n_neg = require_both_classes(labels)
    _, tps, fps = threshold_table(scores, labels)
    return _trapezoid(fps / n_neg, tps / n_pos)


def partial_auc(curve: RocCurve, tpr_lo: float, tpr_hi: float, normalize: bool = True) -> float:
    """Integral of (1 - fpr) over the sensitivity band [tpr_lo, tpr_hi]"""
    if not 0.0 <= tpr_lo < tpr_hi <= 1.0:
        raise ValueError(f"invalid sensitivity band [{tpr_lo}, {tpr_hi}]")
    fpr, tpr, _ = curve.arrays()
    area = 0.0
    for f0, f1, t0, t1 in zip(fpr[:-1], fpr[1:], tpr[:-1], tpr[1:]):
        lo, hi = max(t0, tpr_lo), min(t1, tpr_hi)
        if hi <= lo:
            continue
        # fpr is linear in tpr along a rising segment
        fa = f0 + (f1 - f0) * (lo - t0) / (t1 - t0)
        fb = f0 + (f1 - f0) * (hi - t0) / (t1 - t0)
        area += (hi - lo) * (1.0 - (fa + fb) / 2.0)
    return area / (tpr_hi - tpr_lo) if normalize else area


def tpr_at_fpr(curve: RocCurve, fpr_value: float) -> float:
    """Highest sensitivity the curve reaches at a given false positive rate"""
    fpr, tpr, _ = curve.arrays()
    best = 0.0
    for f0, f1, t0, t1 in zip(fpr[:-1], fpr[1:], tpr[:-1], tpr[1:]):
        if not f0 <= fpr_value <= f1:
            continue
        if f1 == f0:
            best = max(best, t0, t1)
        else:
            best = max(best, t0 + (t1 - t0) * (fpr_value - f0) / (f1 - f0))
    return best


def apply_threshold(scores: Any, labels: Any, threshold: float) -> PerformancePoint:
    """Sensitivity and specificity with positive iff score >= threshold"""
    data = CaseSlice.of(scores, labels)
    n_pos, n_neg = require_both_classes(data.labels)
    called = data.scores >= threshold
    tp = int(np.sum(called & (data.labels == 1)))
    tn = int(np.sum(~called & (data.labels == 0)))
    return PerformancePoint(
        sensitivity=tp / n_pos,
        specificity=tn / n_neg,
        threshold=float(threshold),
        n_pos=n_pos,
        n_neg=n_neg,
    )


def sensitivity_at(threshold: float) -> Callable[[CaseSlice], float]:
    """Bootstrap statistic: sensitivity at a fixed threshold"""

    def statistic(data: CaseSlice) -> float:
        positives = data.labels == 1
        if not positives.any():
            raise DegenerateDataError("no positive cases")
        return float(np.mean(data.scores[positives] >= threshold))

    return statistic


def specificity_at(threshold: float) -> Callable[[CaseSlice], float]:
    """Bootstrap statistic: specificity at a fixed threshold"""

    def statistic(data: CaseSlice) -> float:
        negatives = data.labels == 0
        if not negatives.any():
            raise DegenerateDataError("no negative cases")
        return float(np.mean(data.scores[negatives] < threshold))

    return statistic


def auc_statistic(data: CaseSlice) -> float:
    return auc_score(data.scores, data.labels)


def resample_rng(seed: int, index: int, attempt: int = 0) -> np.random.Generator:
    """Independent stream for one resample, derived from (seed, index, attempt)"""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index, attempt)))


def _draw(data: CaseSlice, rng: np.random.Generator, stratified: bool) -> np.ndarray:
    n = len(data)
    if not stratified:
        return rng.integers(0, n, size=n)
    pos = np.flatnonzero(data.labels == 1)
    neg = np.flatnonzero(data.labels == 0)
    parts = [rng.choice(group, size=group.size, replace=True) for group in (pos, neg) if group.size]
    return np.concatenate(parts)


def nearest_rank_bounds(n: int, level: float) -> Tuple[int, int]:
    """1-based order statistics bounding a two-sided percentile interval"""
    lower = max(1, math.ceil(round(n * (1.0 - level) / 2.0, 9)))
    return lower, n - lower + 1


def bootstrap_ci(
    statistic: Callable[[CaseSlice], float],
    data: CaseSlice,
    config: BootstrapConfig,
) -> ConfidenceInterval:
    """Percentile bootstrap interval over case-level resamples"""
    if len(data) == 0:
        raise DegenerateDataError("cannot bootstrap an empty slice")

    values = np.empty(config.n_resamples)
    budget = 10 * config.n_resamples
    attempts = 0
    for index in range(config.n_resamples):
        attempt = 0
        while True:
            attempts += 1
            if attempts > budget:
                raise DegenerateDataError(
                    f"statistic undefined on too many resamples ({budget} attempts)"
                )
            sample = data.take(_draw(data, resample_rng(config.seed, index, attempt), config.stratified))
            try:
                value = statistic(sample)
            except DegenerateDataError:
                value = math.nan
            if math.isfinite(value):
                values[index] = value
                break
            attempt += 1

    redraws = attempts - config.n_resamples
    if redraws:
        logger.warning("Bootstrap redrew %d undefined resamples", redraws)

    values.sort()
    lo_rank, hi_rank = nearest_rank_bounds(config.n_resamples, config.level)
    try:
        estimate: Optional[float] = statistic(data)
    except DegenerateDataError:
        estimate = None
    return ConfidenceInterval(
        lower=float(values[lo_rank - 1]),
        upper=float(values[hi_rank - 1]),
        level=config.level,
        n_resamples=config.n_resamples,
        seed=config.seed,
        estimate=estimate,
    )


def curve_frame(curve: RocCurve) -> pd.DataFrame:
    """ROC curve as a threshold,fpr,tpr table"""
    fpr, tpr, thresholds = curve.arrays()
    return pd.DataFrame({"threshold": thresholds, "fpr": fpr, "tpr": tpr})


def curve_plot_data(curve: RocCurve, ci: Optional[ConfidenceInterval] = None) -> Dict[str, Any]:
    return {
        "points": [p.model_dump() for p in curve.points],
        "auc": auc(curve),
        "ci": ci.model_dump() if ci else None,
        "n_pos": curve.n_pos,
        "n_neg": curve.n_neg,
    }
