"""Subgroup stratification, technical-issue groups and abnormality scoring"""

import logging
from collections import defaultdict
from typing import Any, Dict, List, Literal, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel

from .errors import DegenerateDataError, IncompleteDesignError
from .models import SYMPTOMS, WHO_FOUR_SYMPTOMS, CaseRecord, Cohort, Predicate, StratumSpec
from .roc_metrics import CaseSlice

logger = logging.getLogger(__name__)

TECHNICAL_ISSUE_COUNT = "technical_issue_count"
CASE_FIELDS = ("dataset", "tb_label", "age", "sex", "hiv_status", "smear_status", "tb_history")
AbnormalityMode = Literal["tb_or_abnormal", "abnormal_only"]


class StratumResult(BaseModel):
    """Cases satisfying a stratum predicate; cases with unknown relevant fields are counted apart"""
    name: str
    cohort: Cohort
    n_unknown: int
    suppressed: bool

    @property
    def n_cases(self) -> int:
        return len(self.cohort.cases)


def technical_issue_counts(cohort: Cohort, include_excluded: bool = False) -> Dict[str, int]:
    """Number of distinct readers flagging a technical issue on each case"""
    allowed = set(cohort.reader_ids(include_excluded=include_excluded))
    flagged: Dict[str, Set[str]] = defaultdict(set)
    for read in cohort.reads:
        if read.technical_issue and read.reader_id in allowed:
            flagged[read.case_id].add(read.reader_id)
    return {c.case_id: len(flagged[c.case_id]) for c in cohort.cases}


def _field_value(case: CaseRecord, field: str, aggregates: Dict[str, Dict[str, int]]) -> Any:
    if field in aggregates:
        return aggregates[field][case.case_id]
    if field in SYMPTOMS:
        if field in case.unrecorded_symptoms:
            return None
        return field in case.symptoms
    if field in CASE_FIELDS:
        return getattr(case, field)
    raise ValueError(f"unknown stratum field {field!r}")


def _any_of(case: CaseRecord, symptoms: Sequence[str]) -> Optional[bool]:
    unknown = False
    for symptom in symptoms:
        if symptom not in SYMPTOMS:
            raise ValueError(f"unknown symptom {symptom!r}")
        if symptom in case.symptoms:
            return True
        unknown = unknown or symptom in case.unrecorded_symptoms
    return None if unknown else False


def evaluate(predicate: Predicate, case: CaseRecord, aggregates: Dict[str, Dict[str, int]]) -> Optional[bool]:
    """True/False, or None when the case's relevant field is unknown"""
    if predicate.op == "any_of":
        return _any_of(case, predicate.value)

    value = _field_value(case, predicate.field, aggregates)
    if value is None:
        return None
    if predicate.op == "=":
        return value == predicate.value
    if predicate.op == "!=":
        return value != predicate.value
    if predicate.op == "<":
        return value < predicate.value
    if predicate.op == ">=":
        return value >= predicate.value
    if predicate.op == "in":
        return value in predicate.value
    raise ValueError(f"unsupported operator {predicate.op!r}")


def _matches(spec: StratumSpec, case: CaseRecord, aggregates: Dict[str, Dict[str, int]]) -> Optional[bool]:
    unknown = False
    for clause in spec.clauses:
        outcome = evaluate(clause, case, aggregates)
        if outcome is False:
            return False
        unknown = unknown or outcome is None
    return None if unknown else True


def stratify(cohort: Cohort, spec: StratumSpec, include_excluded: bool = False) -> StratumResult:
    """Sub-cohort of the cases satisfying every clause of the stratum"""
    aggregates = {}
    if any(c.field == TECHNICAL_ISSUE_COUNT for c in spec.clauses):
        aggregates[TECHNICAL_ISSUE_COUNT] = technical_issue_counts(cohort, include_excluded)

    keep, n_unknown = [], 0
    for case in cohort.cases:
        outcome = _matches(spec, case, aggregates)
        if outcome is None:
            n_unknown += 1
        elif outcome:
            keep.append(case.case_id)

    suppressed = len(keep) < spec.min_cases
    if suppressed:
        logger.warning(
            "Stratum %s suppressed: %d cases below minimum %d", spec.name, len(keep), spec.min_cases
        )
    return StratumResult(
        name=spec.name, cohort=cohort.restrict(keep), n_unknown=n_unknown, suppressed=suppressed
    )


def technical_issue_groups(cohort: Cohort, include_excluded: bool = False) -> List[Tuple[str, Cohort]]:
    """Exact-count groups 0, 1, 2, >=3 followed by cumulative groups >=1, >=2"""
    counts = technical_issue_counts(cohort, include_excluded)
    groups = [
        ("0", lambda n: n == 0),
        ("1", lambda n: n == 1),
        ("2", lambda n: n == 2),
        (">=3", lambda n: n >= 3),
        (">=1", lambda n: n >= 1),
        (">=2", lambda n: n >= 2),
    ]
    return [
        (label, cohort.restrict(cid for cid, n in counts.items() if rule(n)))
        for label, rule in groups
    ]


def abnormality_eval(
    cohort: Cohort,
    k_of_3: int,
    mode: AbnormalityMode,
    ground_truth_readers: Sequence[str],
) -> CaseSlice:
    """Scores and labels for TB-or-abnormal and abnormal-only ROC analyses.

    Labels come from at least k_of_3 of the designated readers calling a case
    abnormal; the model score is dls_tb_score + dls_abnormal_score (unclamped) in
    tb_or_abnormal mode and dls_abnormal_score alone in abnormal_only mode.
    """
    if k_of_3 not in (1, 2, 3):
        raise ValueError(f"k_of_3 must be 1, 2 or 3, got {k_of_3}")
    if mode not in ("tb_or_abnormal", "abnormal_only"):
        raise ValueError(f"unknown abnormality mode {mode!r}")
    if len(set(ground_truth_readers)) != 3:
        raise ValueError("exactly 3 distinct ground-truth readers are required")

    cases = list(cohort.cases)
    if mode == "abnormal_only":
        cases = [c for c in cases if c.tb_label == 0]
    if not cases:
        raise DegenerateDataError(f"no cases left for abnormality mode {mode}")

    missing_scores = [c.case_id for c in cases if c.dls_abnormal_score is None]
    if missing_scores:
        raise DegenerateDataError(
            f"dls_abnormal_score missing on cases: {', '.join(missing_scores)}"
        )

    calls = {
        (r.reader_id, r.case_id): r.abnormal_call
        for r in cohort.reads
        if r.reader_id in ground_truth_readers
    }
    gaps = [
        (rid, c.case_id)
        for c in cases
        for rid in ground_truth_readers
        if calls.get((rid, c.case_id)) is None
    ]
    if gaps:
        raise IncompleteDesignError(gaps)

    votes = np.array([sum(calls[(rid, c.case_id)] for rid in ground_truth_readers) for c in cases])
    abnormal = votes >= k_of_3
    if mode == "tb_or_abnormal":
        labels = np.array([c.tb_label for c in cases], dtype=bool) | abnormal
        scores = [c.dls_tb_score + c.dls_abnormal_score for c in cases]
    else:
        labels = abnormal
        scores = [c.dls_abnormal_score for c in cases]
    return CaseSlice.of(scores, labels.astype(int))


def age_band_edges(cohort: Cohort) -> List[int]:
    """Decile cut points of the observed ages"""
    ages = [c.age for c in cohort.cases if c.age is not None]
    if not ages:
        return []
    deciles = np.percentile(ages, np.arange(10, 100, 10), method="linear")
    return [int(e) for e in np.unique(np.round(deciles))]


def age_band_specs(cohort: Cohort, edges: Optional[Sequence[int]] = None, min_cases: int = 10) -> List[StratumSpec]:
    edges = sorted(set(age_band_edges(cohort) if edges is None else edges))
    if not edges:
        return []
    specs = [
        StratumSpec(
            name=f"age <{edges[0]}",
            clauses=[Predicate(field="age", op="<", value=edges[0])],
            min_cases=min_cases,
        )
    ]
    for lo, hi in zip(edges[:-1], edges[1:]):
        specs.append(
            StratumSpec(
                name=f"age {lo}-{hi - 1}",
                clauses=[
                    Predicate(field="age", op=">=", value=lo),
                    Predicate(field="age", op="<", value=hi),
                ],
                min_cases=min_cases,
            )
        )
    specs.append(
        StratumSpec(
            name=f"age >={edges[-1]}",
            clauses=[Predicate(field="age", op=">=", value=edges[-1])],
            min_cases=min_cases,
        )
    )
    return specs


def _single(name: str, field: str, op: str, value: Any) -> StratumSpec:
    return StratumSpec(name=name, clauses=[Predicate(field=field, op=op, value=value)])


def default_strata() -> List[StratumSpec]:
    """HIV, smear, sex, TB history and symptom strata used when none are configured"""
    return [
        _single("HIV positive", "hiv_status", "=", "positive"),
        _single("HIV negative", "hiv_status", "=", "negative"),
        _single("smear positive", "smear_status", "=", "positive"),
        _single("smear negative", "smear_status", "=", "negative"),
        _single("female", "sex", "=", "female"),
        _single("male", "sex", "=", "male"),
        _single("no prior TB", "tb_history", "=", False),
        _single("cough", "cough", "=", True),
        _single("any WHO four symptom", "symptoms", "any_of", list(WHO_FOUR_SYMPTOMS)),
        _single("any symptom", "symptoms", "any_of", list(SYMPTOMS)),
    ]
