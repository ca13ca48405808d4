"""Synthetic reader-panel cohorts with known operating characteristics.

Probit latent-threshold model: participant j is correct on case k iff
a_j + u_k + e_jk > 0, with u_k ~ N(0, s^2) shared across participants and
e_jk ~ N(0, 1). The base probit is scaled by sqrt(1 + s^2) so the marginal
accuracy equals the requested base accuracy for any case_difficulty_spread.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Union

import numpy as np
from scipy import stats

from ..domain.errors import DegenerateDataError
from ..domain.inference_tests import mrmc_orh_test
from ..domain.models import (
    SYMPTOMS,
    CalibrationResult,
    CaseRecord,
    Cohort,
    Endpoint,
    NoninferiorityConfig,
    PanelSpec,
    ReaderInfo,
    ReaderRead,
)

logger = logging.getLogger(__name__)

# Seed for deterministic generation when none is configured
RANDOM_SEED = 20210401

PROBABILITY_FLOOR = 0.001
PROBABILITY_CEILING = 0.999
LATENT_MODEL = "probit"


@dataclass(frozen=True)
class PanelDraw:
    """Raw arrays of one simulated panel; positives come first"""

    labels: np.ndarray
    scores: np.ndarray
    reader_correct: np.ndarray
    technical_issue: np.ndarray

    @property
    def n_readers(self) -> int:
        return int(self.reader_correct.shape[0])

    def calls(self) -> np.ndarray:
        return np.where(self.reader_correct, self.labels, 1 - self.labels).astype(int)

    def correctness_matrix(self, endpoint: Endpoint, threshold: float = 0.5) -> np.ndarray:
        """Model row followed by reader rows, restricted to the endpoint's class"""
        label = 1 if endpoint == "sensitivity" else 0
        subset = self.labels == label
        algorithm = (self.scores[subset] >= threshold).astype(int) == label
        return np.vstack([algorithm, self.reader_correct[:, subset]]).astype(float)


def _per_reader(value: Union[float, List[float]], n_readers: int) -> np.ndarray:
    if isinstance(value, list):
        return np.asarray(value, dtype=float)
    return np.full(n_readers, float(value))


def _clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROBABILITY_FLOOR, PROBABILITY_CEILING)


def trial_seed(master_seed: int, index: int) -> int:
    """Seed of one Monte-Carlo trial, derived from the master seed"""
    return int(np.random.SeedSequence(master_seed, spawn_key=(index,)).generate_state(1)[0])


def simulate_panel_arrays(spec: PanelSpec) -> PanelDraw:
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    n = spec.n_pos + spec.n_neg
    labels = np.r_[np.ones(spec.n_pos, dtype=int), np.zeros(spec.n_neg, dtype=int)]
    is_pos = labels == 1

    sigma = spec.case_difficulty_spread
    scale = math.sqrt(1.0 + sigma**2)
    difficulty = rng.standard_normal(n) * sigma

    # reader effects shift both sensitivity and specificity on the probit scale
    effects = rng.standard_normal(spec.n_readers) * spec.reader_sens_spread
    sens = _clamp(stats.norm.cdf(stats.norm.ppf(_clamp(_per_reader(spec.reader_sens, spec.n_readers))) + effects))
    spec_ = _clamp(stats.norm.cdf(stats.norm.ppf(_clamp(_per_reader(spec.reader_spec, spec.n_readers))) + effects))

    reader_probit = np.where(is_pos, stats.norm.ppf(sens)[:, None], stats.norm.ppf(spec_)[:, None]) * scale
    p_correct = stats.norm.cdf(reader_probit + difficulty)
    reader_correct = rng.random((spec.n_readers, n)) < p_correct

    algo_probit = np.where(
        is_pos,
        stats.norm.ppf(_clamp(np.array(spec.algo_sens))),
        stats.norm.ppf(_clamp(np.array(spec.algo_spec))),
    ) * scale
    latent = algo_probit + difficulty + rng.standard_normal(n)
    # negatives mirror around 0.5 so that score >= 0.5 stays the positive call
    scores = np.where(is_pos, stats.norm.cdf(latent), stats.norm.cdf(-latent))

    technical_issue = rng.random((spec.n_readers, n)) < spec.technical_issue_rate
    return PanelDraw(
        labels=labels, scores=scores, reader_correct=reader_correct, technical_issue=technical_issue
    )


def generate_panel(spec: PanelSpec) -> Cohort:
    """Synthetic cohort in the regular cohort schema, deterministic given spec.seed"""
    draw = simulate_panel_arrays(spec)
    case_ids = [f"{spec.dataset}-{k + 1:05d}" for k in range(draw.labels.size)]
    reader_ids = [f"{spec.reader_prefix}{j + 1:02d}" for j in range(spec.n_readers)]

    cases = tuple(
        CaseRecord(
            case_id=cid,
            dataset=spec.dataset,
            patient_id=f"P{k + 1:05d}",
            tb_label=int(draw.labels[k]),
            dls_tb_score=float(draw.scores[k]),
            unrecorded_symptoms=frozenset(SYMPTOMS),
        )
        for k, cid in enumerate(case_ids)
    )
    calls = draw.calls()
    reads = tuple(
        ReaderRead(
            case_id=cid,
            reader_id=rid,
            tb_call=int(calls[j, k]),
            technical_issue=bool(draw.technical_issue[j, k]),
        )
        for j, rid in enumerate(reader_ids)
        for k, cid in enumerate(case_ids)
    )
    readers = tuple(ReaderInfo(reader_id=rid, cohort_tag=spec.reader_cohort_tag) for rid in reader_ids)
    logger.info(
        "Generated synthetic panel: %d cases (%d positive), %d readers, seed %d",
        len(cases), spec.n_pos, spec.n_readers, spec.seed,
    )
    return Cohort(cases=cases, reads=reads, readers=readers)


def boundary_spec(base: PanelSpec, margin: float, endpoint: Endpoint = "sensitivity") -> PanelSpec:
    """Place the model's true accuracy exactly margin below the readers' mean"""
    if endpoint == "sensitivity":
        target = float(_per_reader(base.reader_sens, base.n_readers).mean()) - margin
        field = "algo_sens"
    else:
        target = float(_per_reader(base.reader_spec, base.n_readers).mean()) - margin
        field = "algo_spec"
    if not 0.0 < target < 1.0:
        raise DegenerateDataError(f"boundary accuracy {target} is outside (0, 1)")
    return base.model_copy(update={field: target})


def calibrate_type1(
    spec: PanelSpec,
    n_trials: int,
    alpha: float = 0.025,
    margin: float = 0.10,
    endpoint: Endpoint = "sensitivity",
    master_seed: int = RANDOM_SEED,
) -> CalibrationResult:
    """Fraction of simulated panels on which the noninferiority null is rejected"""
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    # margin 0 counts superiority rejections; an infinite gate always computes them
    superiority = margin == 0
    config = NoninferiorityConfig(alpha=alpha, alpha_primary=alpha) if superiority else NoninferiorityConfig(
        margin=margin, alpha=alpha, alpha_primary=alpha
    )

    rejections = 0
    for index in range(n_trials):
        draw = simulate_panel_arrays(spec.model_copy(update={"seed": trial_seed(master_seed, index)}))
        psi = draw.correctness_matrix(endpoint)
        if superiority:
            p_value = mrmc_orh_test(psi, config, endpoint, gate_alpha=math.inf).p_superiority
        else:
            p_value = mrmc_orh_test(psi, config, endpoint).p_noninferiority
        rejections += int(p_value < alpha)

    rate = rejections / n_trials
    logger.info(
        "Calibration: %d/%d rejections (rate %.4f) at alpha %.4f, margin %.3f",
        rejections, n_trials, rate, alpha, margin,
    )
    return CalibrationResult(
        rejection_rate=rate,
        rejections=rejections,
        n_trials=n_trials,
        alpha=alpha,
        margin=margin,
        master_seed=master_seed,
        latent_model=LATENT_MODEL,
    )
