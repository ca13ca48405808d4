"""Domain models for tbeval"""

from typing import Any, Dict, FrozenSet, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

Symptom = Literal[
    "cough", "weight_loss", "fever", "night_sweats", "shortness_of_breath", "chest_pain"
]
SYMPTOMS: Tuple[str, ...] = (
    "cough",
    "weight_loss",
    "fever",
    "night_sweats",
    "shortness_of_breath",
    "chest_pain",
)
WHO_FOUR_SYMPTOMS: Tuple[str, ...] = ("cough", "weight_loss", "fever", "night_sweats")

CohortTag = Literal["india_based", "us_based", "other"]
Endpoint = Literal["sensitivity", "specificity"]
SelectionRule = Literal[
    "prespecified",
    "sens_at_spec",
    "spec_at_sens",
    "match_mean_reader",
    "match_individual_reader",
]
EndpointLabel = Literal["not_noninferior", "noninferior", "superior"]


class CaseRecord(BaseModel):
    """One imaged patient with ground truth and model scores"""
    model_config = ConfigDict(frozen=True)

    case_id: str = Field(min_length=1)
    dataset: str = Field(min_length=1)
    patient_id: str
    tb_label: Literal[0, 1]
    dls_tb_score: float = Field(ge=0.0, le=1.0)
    dls_abnormal_score: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    age: Optional[int] = Field(default=None, ge=0)
    sex: Optional[Literal["female", "male"]] = None
    hiv_status: Optional[Literal["positive", "negative"]] = None
    smear_status: Optional[Literal["positive", "negative"]] = None
    tb_history: Optional[bool] = None
    symptoms: FrozenSet[Symptom] = frozenset()
    unrecorded_symptoms: FrozenSet[Symptom] = frozenset()

    @model_validator(mode="after")
    def _symptoms_disjoint(self) -> "CaseRecord":
        if self.symptoms & self.unrecorded_symptoms:
            raise ValueError("a symptom cannot be both present and unrecorded")
        return self


class ReaderRead(BaseModel):
    """One radiologist's call on one case"""
    model_config = ConfigDict(frozen=True)

    case_id: str
    reader_id: str
    tb_call: Literal[0, 1]
    abnormal_call: Optional[Literal[0, 1]] = None
    technical_issue: bool = False


class ReaderInfo(BaseModel):
    """Reader panel metadata"""
    model_config = ConfigDict(frozen=True)

    reader_id: str = Field(min_length=1)
    cohort_tag: CohortTag = "other"
    years_experience: Optional[int] = Field(default=None, ge=0)


class Cohort(BaseModel):
    """Cases, reads and reader panel; immutable once built"""
    model_config = ConfigDict(frozen=True)

    cases: Tuple[CaseRecord, ...] = ()
    reads: Tuple[ReaderRead, ...] = ()
    readers: Tuple[ReaderInfo, ...] = ()
    excluded_readers: FrozenSet[str] = frozenset()

    @property
    def n_positive(self) -> int:
        return sum(c.tb_label for c in self.cases)

    @property
    def n_negative(self) -> int:
        return len(self.cases) - self.n_positive

    @property
    def datasets(self) -> List[str]:
        """Dataset names in order of first appearance"""
        return list(dict.fromkeys(c.dataset for c in self.cases))

    def scores(self) -> np.ndarray:
        return np.array([c.dls_tb_score for c in self.cases], dtype=float)

    def labels(self) -> np.ndarray:
        return np.array([c.tb_label for c in self.cases], dtype=int)

    def reader_ids(
        self, include_excluded: bool = False, cohort_tag: Optional[str] = None
    ) -> List[str]:
        return [
            r.reader_id
            for r in self.readers
            if (include_excluded or r.reader_id not in self.excluded_readers)
            and (cohort_tag is None or r.cohort_tag == cohort_tag)
        ]

    def cohort_tags(self) -> List[str]:
        return list(dict.fromkeys(r.cohort_tag for r in self.readers))

    def restrict(self, case_ids: Any) -> "Cohort":
        """Sub-cohort on the given case ids, reads restricted accordingly"""
        keep = set(case_ids)
        return self.model_copy(
            update={
                "cases": tuple(c for c in self.cases if c.case_id in keep),
                "reads": tuple(r for r in self.reads if r.case_id in keep),
            }
        )

    def for_dataset(self, dataset: str) -> "Cohort":
        return self.restrict(c.case_id for c in self.cases if c.dataset == dataset)


class DatasetCounts(BaseModel):
    n_cases: int
    n_positive: int
    n_negative: int


class ValidationReport(BaseModel):
    """Counts, missing-attribute tallies and invariant violations"""
    n_cases: int
    n_positive: int
    n_negative: int
    n_readers: int
    n_excluded_readers: int
    n_reads: int
    per_dataset: Dict[str, DatasetCounts]
    missing: Dict[str, float]
    violations: List[str] = Field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not self.violations


class PerformancePoint(BaseModel):
    """Sensitivity and specificity at a threshold"""
    sensitivity: float = Field(ge=0.0, le=1.0)
    specificity: float = Field(ge=0.0, le=1.0)
    threshold: Optional[float] = None
    n_pos: int = Field(ge=0)
    n_neg: int = Field(ge=0)

    @model_validator(mode="after")
    def _empirical(self) -> "PerformancePoint":
        for rate, n in ((self.sensitivity, self.n_pos), (self.specificity, self.n_neg)):
            if n and abs(rate * n - round(rate * n)) > 1e-6:
                raise ValueError("rates must be empirical proportions of the counts")
        return self

    @property
    def true_positives(self) -> int:
        return int(round(self.sensitivity * self.n_pos))

    @property
    def true_negatives(self) -> int:
        return int(round(self.specificity * self.n_neg))


class RocPoint(BaseModel):
    fpr: float = Field(ge=0.0, le=1.0)
    tpr: float = Field(ge=0.0, le=1.0)
    threshold: float


class RocCurve(BaseModel):
    """Empirical ROC curve, ordered from the strictest threshold"""
    points: List[RocPoint]
    n_pos: int = Field(ge=1)
    n_neg: int = Field(ge=1)

    @model_validator(mode="after")
    def _endpoints(self) -> "RocCurve":
        first, last = self.points[0], self.points[-1]
        if (first.fpr, first.tpr) != (0.0, 0.0) or (last.fpr, last.tpr) != (1.0, 1.0):
            raise ValueError("ROC curve must run from (0,0) to (1,1)")
        return self

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """fpr, tpr and threshold arrays"""
        return (
            np.array([p.fpr for p in self.points]),
            np.array([p.tpr for p in self.points]),
            np.array([p.threshold for p in self.points]),
        )


class ConfidenceInterval(BaseModel):
    lower: float
    upper: float
    level: float = Field(gt=0.0, lt=1.0)
    n_resamples: int
    seed: int
    estimate: Optional[float] = None

    @model_validator(mode="after")
    def _ordered(self) -> "ConfidenceInterval":
        if self.lower > self.upper:
            raise ValueError("lower bound exceeds upper bound")
        return self


class BootstrapConfig(BaseModel):
    n_resamples: int = Field(default=1000, ge=1)
    level: float = Field(default=0.95, gt=0.0, lt=1.0)
    seed: int = 0
    stratified: bool = True


class OperatingPoint(BaseModel):
    threshold: float
    point: PerformancePoint
    selection_rule: SelectionRule
    target: Optional[float] = None


class PanelSummary(BaseModel):
    """Distribution of reader performance within a panel"""
    n_readers: int
    mean: float
    median: float
    q1: float
    q3: float
    minimum: float
    maximum: float


class NoninferiorityConfig(BaseModel):
    margin: float = Field(default=0.10, gt=0.0, lt=1.0)
    alpha: float = 0.025
    alpha_primary: float = 0.0125
    higher_is_better: bool = True

    @model_validator(mode="after")
    def _alphas(self) -> "NoninferiorityConfig":
        if not 0.0 < self.alpha_primary <= self.alpha < 0.5:
            raise ValueError("require 0 < alpha_primary <= alpha < 0.5")
        return self


class MrmcResult(BaseModel):
    """Standalone algorithm versus reader-panel average on one endpoint"""
    endpoint: Endpoint
    delta: float
    se: float = Field(ge=0.0)
    df: float = Field(gt=0.0)
    p_noninferiority: float = Field(ge=0.0, le=1.0)
    p_superiority: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    s_d_squared: float = Field(ge=0.0)
    cov2_bar: float
    n_readers: int
    n_cases: int
    margin: float
    algorithm_accuracy: Optional[float] = None
    reader_mean_accuracy: Optional[float] = None
    flags: List[str] = Field(default_factory=list)


class TestOutcome(BaseModel):
    """Sequential noninferiority-then-superiority labels per endpoint"""
    __test__ = False

    labels: Dict[str, EndpointLabel]
    alpha_primary: float
    alpha: float


class PairedCounts(BaseModel):
    """Algorithm x reader correctness on the same cases"""
    n11: int = Field(ge=0)
    n10: int = Field(ge=0)
    n01: int = Field(ge=0)
    n00: int = Field(ge=0)

    @property
    def b(self) -> int:
        return self.n10

    @property
    def c(self) -> int:
        return self.n01

    @property
    def n(self) -> int:
        return self.n11 + self.n10 + self.n01 + self.n00


class WaldResult(BaseModel):
    delta: float
    variance: float
    z: Optional[float] = None
    p_value: float = Field(ge=0.0, le=1.0)
    flags: List[str] = Field(default_factory=list)


class KsResult(BaseModel):
    statistic: float = Field(ge=0.0, le=1.0)
    p_value: float = Field(ge=0.0, le=1.0)
    n1: int
    n2: int


Operator = Literal["=", "!=", "<", ">=", "in", "any_of"]


class Predicate(BaseModel):
    field: str
    op: Operator
    value: Any


class StratumSpec(BaseModel):
    """Named conjunction of predicates over case fields and read aggregates"""
    name: str
    clauses: List[Predicate] = Field(default_factory=list)
    min_cases: int = Field(default=10, ge=0)

    def conjoin(self, other: "StratumSpec", name: Optional[str] = None) -> "StratumSpec":
        return StratumSpec(
            name=name or f"{self.name} & {other.name}",
            clauses=[*self.clauses, *other.clauses],
            min_cases=max(self.min_cases, other.min_cases),
        )


class CostInputs(BaseModel):
    prevalence: float = Field(gt=0.0, lt=1.0)
    sensitivity: float = Field(ge=0.0, le=1.0)
    specificity: float = Field(ge=0.0, le=1.0)
    cost_confirmatory_test: float = Field(default=13.06, ge=0.0)
    cost_cxr: float = Field(default=1.49, ge=0.0)
    cost_cad: float = Field(default=0.0, ge=0.0)


class CostResult(BaseModel):
    prevalence: float
    triage_positive_rate: float = Field(ge=0.0, le=1.0)
    cost_per_patient_screened: float
    true_positive_rate_per_patient: float
    cost_per_case_detected: float
    naat_only_cost_per_case: float
    savings_fraction: float


class PrevalenceSweep(BaseModel):
    rows: List[CostResult]
    cost_per_case_decreasing_in_prevalence: bool
    savings_increasing_as_prevalence_falls: bool


class PanelSpec(BaseModel):
    """Synthetic reader-panel design with known operating characteristics"""
    n_pos: int = Field(ge=1)
    n_neg: int = Field(ge=1)
    n_readers: int = Field(ge=1)
    reader_sens: Union[float, List[float]] = 0.8
    reader_spec: Union[float, List[float]] = 0.8
    reader_sens_spread: float = Field(default=0.0, ge=0.0)
    algo_sens: float = Field(default=0.8, ge=0.0, le=1.0)
    algo_spec: float = Field(default=0.8, ge=0.0, le=1.0)
    case_difficulty_spread: float = Field(default=0.0, ge=0.0)
    seed: int = 0
    dataset: str = "synthetic"
    reader_prefix: str = "R"
    reader_cohort_tag: CohortTag = "other"
    technical_issue_rate: float = Field(default=0.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _per_reader_lengths(self) -> "PanelSpec":
        for name in ("reader_sens", "reader_spec"):
            value = getattr(self, name)
            if isinstance(value, list) and len(value) != self.n_readers:
                raise ValueError(f"{name} must list one value per reader")
        return self


class CalibrationResult(BaseModel):
    rejection_rate: float
    rejections: int
    n_trials: int
    alpha: float
    margin: float
    master_seed: int
    latent_model: str = "probit"


class ProvenanceEntry(BaseModel):
    """How one emitted number can be recomputed"""
    output: str
    key: str
    operation: str
    params: Dict[str, Any]
    value: Optional[float]


class GroupComparison(BaseModel):
    """Difference in mean reader accuracy between two reader groups on the same cases"""
    endpoint: Endpoint
    group_a: str
    group_b: str
    mean_a: float
    mean_b: float
    difference: float
    ci: Optional[ConfidenceInterval] = None
