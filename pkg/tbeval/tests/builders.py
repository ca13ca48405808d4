"""Cohort builders shared by the tests"""

from typing import Any, Mapping, Optional, Sequence

from ..domain.models import CaseRecord, Cohort, PanelSpec, ReaderInfo, ReaderRead
from ..simulators.synth_oracle import generate_panel


def make_case(case_id: str, tb_label: int, score: float, dataset: str = "alpha", **fields: Any) -> CaseRecord:
    fields.setdefault("patient_id", f"P-{case_id}")
    return CaseRecord(case_id=case_id, dataset=dataset, tb_label=tb_label, dls_tb_score=score, **fields)


def make_cohort(
    cases: Sequence[CaseRecord],
    calls: Mapping[str, Sequence[int]],
    tags: Optional[Mapping[str, str]] = None,
    issues: Optional[Mapping[str, Sequence[int]]] = None,
    abnormal: Optional[Mapping[str, Sequence[int]]] = None,
) -> Cohort:
    """Cohort where calls[reader][k] is that reader's call on cases[k]"""
    reads = [
        ReaderRead(
            case_id=case.case_id,
            reader_id=rid,
            tb_call=call,
            technical_issue=bool(issues[rid][k]) if issues and rid in issues else False,
            abnormal_call=abnormal[rid][k] if abnormal and rid in abnormal else None,
        )
        for rid, row in calls.items()
        for k, (case, call) in enumerate(zip(cases, row))
    ]
    readers = [ReaderInfo(reader_id=rid, cohort_tag=(tags or {}).get(rid, "india_based")) for rid in calls]
    return Cohort(cases=tuple(cases), reads=tuple(reads), readers=tuple(readers))


def study_cohort(dataset: str = "alpha", seed: int = 7, n_pos: int = 30, n_neg: int = 60) -> Cohort:
    """Synthetic dataset read in full by five India-based and four US-based readers"""
    india_spec = PanelSpec(
        n_pos=n_pos,
        n_neg=n_neg,
        n_readers=5,
        reader_sens=0.75,
        reader_spec=0.80,
        algo_sens=0.85,
        algo_spec=0.80,
        case_difficulty_spread=0.5,
        seed=seed,
        dataset=dataset,
        reader_prefix="IN",
        reader_cohort_tag="india_based",
        technical_issue_rate=0.1,
    )
    us_spec = india_spec.model_copy(
        update={
            "n_readers": 4,
            "reader_sens": 0.70,
            "reader_spec": 0.85,
            "reader_prefix": "US",
            "reader_cohort_tag": "us_based",
            "seed": seed + 1,
        }
    )
    india = generate_panel(india_spec)
    us = generate_panel(us_spec)
    return Cohort(cases=india.cases, reads=india.reads + us.reads, readers=india.readers + us.readers)


OUTLIER_RATES = [0.15, 0.22, 0.24, 0.25, 0.26, 0.27, 0.28, 0.30, 0.31, 0.33]


def outlier_panel() -> Cohort:
    """Ten readers on 100 cases whose positive rates are exactly OUTLIER_RATES"""
    cases = [make_case(f"c{k:03d}", int(k < 20), (k % 17) / 17) for k in range(100)]
    calls = {}
    for j, rate in enumerate(OUTLIER_RATES):
        positives = round(rate * 100)
        calls[f"R{j + 1:02d}"] = [int(k < positives) for k in range(100)]
    return make_cohort(cases, calls)
