"""Tests for ROC curves, AUC and bootstrap intervals"""

import numpy as np
import pytest

from ..domain.errors import DegenerateDataError
from ..domain.models import BootstrapConfig
from ..domain.roc_metrics import (
    CaseSlice,
    apply_threshold,
    auc,
    auc_score,
    auc_statistic,
    bootstrap_ci,
    curve_frame,
    nearest_rank_bounds,
    partial_auc,
    roc_curve,
    sensitivity_at,
    tpr_at_fpr,
)


def _pairs_auc(scores, labels):
    """Mann-Whitney pair counting with ties as one half"""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def _random_instance(rng):
    n = int(rng.integers(2, 201))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 1, 0
    if rng.random() < 0.5:
        # heavy ties
        scores = rng.integers(0, 5, size=n) / 4.0
    else:
        scores = rng.random(n)
    return scores, labels


def _points(curve):
    return [(p.fpr, p.tpr) for p in curve.points]


def test_roc_curve_small_example():
    """Test the hand-enumerated curve for two positives and two negatives"""
    curve = roc_curve([0.9, 0.4, 0.1, 0.5], [1, 1, 0, 0])

    assert _points(curve) == [(0, 0), (0, 0.5), (0.5, 0.5), (0.5, 1), (1, 1)]
    assert auc(curve) == pytest.approx(0.75)
    assert curve.points[0].threshold > 0.9


def test_roc_curve_separated_and_tied():
    """Test separated scores reach (0, 1) and fully tied scores give one step"""
    separated = roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    tied = roc_curve([0.5] * 4, [1, 0, 1, 0])

    assert (0.0, 1.0) in _points(separated)
    assert auc(separated) == 1.0
    assert _points(tied) == [(0, 0), (1, 1)]
    assert auc(tied) == 0.5


def test_roc_curve_single_class():
    """Test that one-class labels are rejected"""
    with pytest.raises(DegenerateDataError):
        roc_curve([0.2, 0.4], [1, 1])


def test_auc_matches_pair_counting():
    """Test trapezoidal AUC against brute-force pair counting on random instances"""
    rng = np.random.default_rng(2021)
    for _ in range(100):
        scores, labels = _random_instance(rng)
        assert abs(auc(roc_curve(scores, labels)) - _pairs_auc(scores, labels)) < 1e-12
        assert abs(auc_score(scores, labels) - _pairs_auc(scores, labels)) < 1e-12


def test_auc_transform_invariance():
    """Test invariance under increasing transforms and the reversal identity"""
    rng = np.random.default_rng(5)
    scores = rng.random(80)
    labels = (rng.random(80) < 0.4).astype(int)
    labels[:2] = [0, 1]

    base = auc_score(scores, labels)
    assert auc_score(np.exp(3 * scores), labels) == pytest.approx(base, abs=1e-12)
    assert auc_score(-scores, labels) + base == pytest.approx(1.0, abs=1e-12)


def test_partial_auc_examples():
    """Test perfect, diagonal and worked-example bands"""
    perfect = roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    diagonal = roc_curve([0.5] * 4, [1, 0, 1, 0])
    example = roc_curve([0.9, 0.4, 0.1, 0.5], [1, 1, 0, 0])

    assert partial_auc(perfect, 0.8, 1.0) == pytest.approx(1.0)
    assert partial_auc(diagonal, 0.0, 1.0) == pytest.approx(0.5)
    assert partial_auc(example, 0.5, 1.0) == pytest.approx(0.5)
    assert partial_auc(example, 0.5, 1.0, normalize=False) == pytest.approx(0.25)


def test_partial_auc_full_band_equals_auc():
    """Test that the full band reproduces the ordinary AUC"""
    rng = np.random.default_rng(11)
    scores, labels = rng.random(60), np.r_[np.ones(25, dtype=int), np.zeros(35, dtype=int)]
    curve = roc_curve(scores, labels)

    assert partial_auc(curve, 0.0, 1.0) == pytest.approx(auc(curve), abs=1e-12)


def test_partial_auc_invalid_band():
    """Test that an empty band is an error"""
    curve = roc_curve([0.9, 0.1], [1, 0])
    with pytest.raises(ValueError):
        partial_auc(curve, 0.6, 0.6)


def test_tpr_at_fpr():
    """Test the highest sensitivity reached at a false positive rate"""
    curve = roc_curve([0.9, 0.4, 0.1, 0.5], [1, 1, 0, 0])

    assert tpr_at_fpr(curve, 0.5) == 1.0
    assert tpr_at_fpr(curve, 0.25) == 0.5
    assert tpr_at_fpr(curve, 0.75) == 1.0


def test_apply_threshold_uses_greater_or_equal():
    """Test that a score equal to the threshold is called positive"""
    point = apply_threshold([0.5, 0.45, 0.3, 0.44, 0.1], [1, 1, 1, 0, 0], 0.45)

    assert point.sensitivity == pytest.approx(2 / 3)
    assert point.specificity == 1.0


def test_apply_threshold_extremes():
    """Test thresholds at zero and just above the maximum score"""
    scores, labels = [0.5, 0.45, 0.3, 0.44, 0.1], [1, 1, 1, 0, 0]

    everything = apply_threshold(scores, labels, 0.0)
    nothing = apply_threshold(scores, labels, np.nextafter(0.5, 1.0))

    assert (everything.sensitivity, everything.specificity) == (1.0, 0.0)
    assert (nothing.sensitivity, nothing.specificity) == (0.0, 1.0)


def test_nearest_rank_bounds():
    """Test the 25th/976th order statistics at level 0.95 and 1000 resamples"""
    assert nearest_rank_bounds(1000, 0.95) == (25, 976)


def test_bootstrap_constant_statistic():
    """Test that a constant statistic gives a degenerate interval"""
    data = CaseSlice.of([0.1, 0.9, 0.4], [0, 1, 1])
    ci = bootstrap_ci(lambda d: 0.42, data, BootstrapConfig(n_resamples=50, seed=1))

    assert ci.lower == ci.upper == 0.42


def test_bootstrap_is_deterministic_per_seed():
    """Test identical intervals per seed and stable intervals across seeds"""
    rng = np.random.default_rng(17)
    labels = np.r_[np.ones(150, dtype=int), np.zeros(350, dtype=int)]
    scores = np.clip(rng.normal(0.35 + 0.3 * labels, 0.15), 0, 1)
    data = CaseSlice.of(scores, labels)

    first = bootstrap_ci(auc_statistic, data, BootstrapConfig(n_resamples=300, seed=1))
    again = bootstrap_ci(auc_statistic, data, BootstrapConfig(n_resamples=300, seed=1))
    other = bootstrap_ci(auc_statistic, data, BootstrapConfig(n_resamples=300, seed=2))

    assert first == again
    assert abs(first.lower - other.lower) < 0.02
    assert abs(first.upper - other.upper) < 0.02
    assert first.lower <= first.estimate <= first.upper


def test_bootstrap_stratified_keeps_class_counts():
    """Test that stratified resamples always contain both classes"""
    data = CaseSlice.of([0.9, 0.2, 0.3, 0.1, 0.05, 0.6], [1, 0, 0, 0, 0, 0])
    ci = bootstrap_ci(sensitivity_at(0.5), data, BootstrapConfig(n_resamples=40, seed=3))

    assert ci.lower == ci.upper == 1.0


def test_bootstrap_redraws_then_gives_up():
    """Test that a statistic undefined on every resample exhausts the attempt budget"""
    data = CaseSlice.of([0.9, 0.2], [1, 0])

    def undefined(_):
        raise DegenerateDataError("never defined")

    with pytest.raises(DegenerateDataError):
        bootstrap_ci(undefined, data, BootstrapConfig(n_resamples=5, seed=0))


def test_curve_frame_columns():
    """Test the tabular ROC output"""
    frame = curve_frame(roc_curve([0.9, 0.4, 0.1, 0.5], [1, 1, 0, 0]))

    assert list(frame.columns) == ["threshold", "fpr", "tpr"]
    assert len(frame) == 5
