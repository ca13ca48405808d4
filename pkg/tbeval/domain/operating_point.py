"""Operating point selection and reader-matched thresholds"""

from typing import Any, Dict, List, Literal, Mapping, Sequence, Tuple

import numpy as np

from .errors import DegenerateDataError
from .models import Cohort, OperatingPoint, PanelSummary, PerformancePoint, RocCurve, SelectionRule
from .roc_metrics import CaseSlice, require_both_classes, apply_threshold, threshold_table, tpr_at_fpr

# Tolerance when comparing empirical fractions against targets
EPS = 1e-12

WHO_MIN_SENSITIVITY = 0.90
WHO_MIN_SPECIFICITY = 0.70

MatchOn = Literal["sensitivity", "specificity"]


def _scan(scores: Any, labels: Any) -> Tuple[np.ndarray, np.ndarray, np.ndarray, CaseSlice]:
    data = CaseSlice.of(scores, labels)
    n_pos, n_neg = require_both_classes(data.labels)
    thresholds, tps, fps = threshold_table(data.scores, data.labels)
    return thresholds, tps / n_pos, 1.0 - fps / n_neg, data


def _select(data: CaseSlice, threshold: float, rule: SelectionRule, target: float) -> OperatingPoint:
    threshold = float(threshold)
    return OperatingPoint(
        threshold=threshold,
        point=apply_threshold(data.scores, data.labels, threshold),
        selection_rule=rule,
        target=target,
    )


def prespecified(scores: Any, labels: Any, threshold: float) -> OperatingPoint:
    data = CaseSlice.of(scores, labels)
    return OperatingPoint(
        threshold=float(threshold),
        point=apply_threshold(data.scores, data.labels, threshold),
        selection_rule="prespecified",
    )


def spec_at_sens(scores: Any, labels: Any, target_sens: float) -> OperatingPoint:
    """Largest threshold whose sensitivity meets the target (maximal specificity)"""
    if not 0.0 < target_sens <= 1.0:
        raise ValueError(f"target sensitivity must be in (0, 1], got {target_sens}")
    thresholds, sens, _, data = _scan(scores, labels)
    # Specificity falls along the descending thresholds, so the first hit is optimal
    index = int(np.flatnonzero(sens >= target_sens - EPS)[0])
    return _select(data, thresholds[index], "spec_at_sens", target_sens)


def sens_at_spec(scores: Any, labels: Any, target_spec: float) -> OperatingPoint:
    """Threshold meeting the specificity target with maximal sensitivity"""
    if not 0.0 <= target_spec <= 1.0:
        raise ValueError(f"target specificity must be in [0, 1], got {target_spec}")
    thresholds, sens, spec, data = _scan(scores, labels)
    feasible = np.flatnonzero(spec >= target_spec - EPS)
    best = sens[feasible].max()
    index = int(feasible[np.flatnonzero(sens[feasible] == best)[0]])
    return _select(data, thresholds[index], "sens_at_spec", target_spec)


def _match(scores: Any, labels: Any, target: float, match_on: MatchOn, rule: SelectionRule) -> OperatingPoint:
    if match_on == "specificity":
        chosen = sens_at_spec(scores, labels, target)
    elif match_on == "sensitivity":
        chosen = spec_at_sens(scores, labels, target)
    else:
        raise ValueError(f"match_on must be 'sensitivity' or 'specificity', got {match_on!r}")
    return chosen.model_copy(update={"selection_rule": rule})


def match_mean_reader(
    scores: Any, labels: Any, panel: Sequence[PerformancePoint], match_on: MatchOn
) -> OperatingPoint:
    """Meet the panel's mean sensitivity or specificity, maximizing the other axis"""
    if not panel:
        raise DegenerateDataError("reader panel is empty")
    target = float(np.mean([getattr(p, match_on) for p in panel]))
    return _match(scores, labels, target, match_on, "match_mean_reader")


def match_individual_reader(
    scores: Any, labels: Any, reader: PerformancePoint, match_on: MatchOn
) -> OperatingPoint:
    return _match(scores, labels, getattr(reader, match_on), match_on, "match_individual_reader")


def who_compliance(point: PerformancePoint) -> bool:
    """Meets the WHO target product profile (sens >= 90%, spec >= 70%)"""
    return (
        point.sensitivity >= WHO_MIN_SENSITIVITY - EPS
        and point.specificity >= WHO_MIN_SPECIFICITY - EPS
    )


def reader_performance(cohort: Cohort, reader_ids: Sequence[str]) -> Dict[str, PerformancePoint]:
    """Each reader's sensitivity and specificity over the cases they read"""
    labels = {c.case_id: c.tb_label for c in cohort.cases}
    calls: Dict[str, List[Tuple[int, int]]] = {rid: [] for rid in reader_ids}
    for read in cohort.reads:
        if read.reader_id in calls and read.case_id in labels:
            calls[read.reader_id].append((labels[read.case_id], read.tb_call))

    points = {}
    for rid, pairs in calls.items():
        truth = np.array([t for t, _ in pairs], dtype=int)
        called = np.array([c for _, c in pairs], dtype=float)
        try:
            points[rid] = apply_threshold(called, truth, 0.5).model_copy(update={"threshold": None})
        except DegenerateDataError:
            continue
    return points


def panel_summary(values: Sequence[float]) -> PanelSummary:
    """Mean, median, quartiles and range of reader performance"""
    if not len(values):
        raise DegenerateDataError("reader panel is empty")
    array = np.asarray(values, dtype=float)
    q1, median, q3 = np.percentile(array, [25, 50, 75], method="linear")
    return PanelSummary(
        n_readers=int(array.size),
        mean=float(array.mean()),
        median=float(median),
        q1=float(q1),
        q3=float(q3),
        minimum=float(array.min()),
        maximum=float(array.max()),
    )


def readers_below_curve(curve: RocCurve, points: Mapping[str, PerformancePoint]) -> List[str]:
    """Readers whose (1 - specificity, sensitivity) lies strictly below the ROC curve"""
    return [
        rid
        for rid, p in points.items()
        if p.sensitivity < tpr_at_fpr(curve, 1.0 - p.specificity) - EPS
    ]
