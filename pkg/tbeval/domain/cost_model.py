"""Two-stage screening economics: CXR triage gating confirmatory NAAT testing"""

from typing import List

import numpy as np

from .errors import DegenerateDataError
from .models import CostInputs, CostResult, PrevalenceSweep
from .operating_point import EPS, WHO_MIN_SENSITIVITY

# Currency precision of the written tables
CURRENCY_DECIMALS = 4


def round_money(value: float) -> float:
    return round(value, CURRENCY_DECIMALS)


def evaluate_cost(inputs: CostInputs) -> CostResult:
    """Expected cost per true-positive case detected when triage gates NAAT"""
    p, se, sp = inputs.prevalence, inputs.sensitivity, inputs.specificity
    detected = p * se
    if detected <= 0:
        raise DegenerateDataError("no detectable cases: prevalence x sensitivity is 0")

    rate = p * se + (1 - p) * (1 - sp)
    per_patient = inputs.cost_cxr + inputs.cost_cad + rate * inputs.cost_confirmatory_test
    per_case = per_patient / detected
    naat_only = inputs.cost_confirmatory_test / p
    savings = 1 - per_case / naat_only if naat_only > 0 else 0.0
    return CostResult(
        prevalence=p,
        triage_positive_rate=rate,
        cost_per_patient_screened=per_patient,
        true_positive_rate_per_patient=detected,
        cost_per_case_detected=per_case,
        naat_only_cost_per_case=naat_only,
        savings_fraction=savings,
    )


def evaluate_naat_only(prevalence: float, cost_confirmatory_test: float = 13.06) -> CostResult:
    """Baseline where every patient goes straight to NAAT"""
    inputs = CostInputs(
        prevalence=prevalence,
        sensitivity=1.0,
        specificity=0.0,
        cost_confirmatory_test=cost_confirmatory_test,
        cost_cxr=0.0,
        cost_cad=0.0,
    )
    return evaluate_cost(inputs).model_copy(update={"savings_fraction": 0.0})


def prevalence_grid(p_min: float, p_max: float, step: float) -> List[float]:
    if not 0.0 < p_min <= p_max < 1.0:
        raise ValueError(f"require 0 < p_min <= p_max < 1, got [{p_min}, {p_max}]")
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    count = int(np.floor((p_max - p_min) / step + 1e-9)) + 1
    return [round(p_min + i * step, 10) for i in range(count)]


def prevalence_sweep(template: CostInputs, p_min: float, p_max: float, step: float) -> PrevalenceSweep:
    """evaluate_cost over an ascending prevalence grid, with monotonicity diagnostics"""
    rows = [
        evaluate_cost(template.model_copy(update={"prevalence": p}))
        for p in prevalence_grid(p_min, p_max, step)
    ]
    per_case = [r.cost_per_case_detected for r in rows]
    savings = [r.savings_fraction for r in rows]
    return PrevalenceSweep(
        rows=rows,
        cost_per_case_decreasing_in_prevalence=all(b < a for a, b in zip(per_case, per_case[1:])),
        savings_increasing_as_prevalence_falls=all(b < a for a, b in zip(savings, savings[1:])),
    )


def workflow_sensitivity(inputs: CostInputs) -> float:
    """Overall detection sensitivity of triage followed by a perfectly sensitive NAAT"""
    return inputs.sensitivity


def meets_who_floor(inputs: CostInputs) -> bool:
    return workflow_sensitivity(inputs) >= WHO_MIN_SENSITIVITY - EPS
