"""Cohort loading, validation and reader-panel hygiene"""

import csv
import logging
from collections import Counter, defaultdict
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Set, Tuple, TypeVar, Union

import numpy as np
import pandas as pd

from .errors import CohortLoadError, DegenerateDataError, IntegrityError
from .mapping import (
    CASE_COLUMNS,
    READ_COLUMNS,
    READER_COLUMNS,
    Row,
    to_case,
    to_read,
    to_reader,
)
from .models import SYMPTOMS, Cohort, DatasetCounts, ValidationReport

logger = logging.getLogger(__name__)

T = TypeVar("T")
PathLike = Union[str, Path]

# Outlier fences sit this many IQRs outside the quartiles
IQR_FENCE = 1.5
MIN_READERS_FOR_OUTLIERS = 4


def _check_layout(path: PathLike, columns: List[str]) -> None:
    """Header matches the expected columns and every data row has one field per column"""
    with open(path, "r", encoding="utf-8-sig", newline="") as f:
        reader = csv.reader(f)
        for fields in reader:
            if not fields:
                continue
            if reader.line_num == 1:
                if fields != columns:
                    raise CohortLoadError(path, 1, None, f"unexpected header {fields}, expected {columns}")
            elif len(fields) != len(columns):
                raise CohortLoadError(
                    path, reader.line_num, None, f"expected {len(columns)} fields, got {len(fields)}"
                )


def _read_rows(path: PathLike, columns: List[str]) -> List[Tuple[int, Row]]:
    """Read a CSV with every cell as text; returns (line number, row) pairs"""
    try:
        _check_layout(path, columns)
        frame = pd.read_csv(
            path,
            dtype=str,
            index_col=False,
            keep_default_na=False,
            na_filter=False,
            encoding="utf-8",
            skip_blank_lines=True,
        )
    except UnicodeDecodeError as e:
        raise CohortLoadError(path, None, None, f"not valid UTF-8 ({e.reason} at byte {e.start})") from None
    except pd.errors.EmptyDataError:
        raise CohortLoadError(path, 1, None, "file is empty") from None
    except pd.errors.ParserError as e:
        raise CohortLoadError(path, None, None, f"malformed CSV: {e}") from None
    except csv.Error as e:
        raise CohortLoadError(path, None, None, f"malformed CSV: {e}") from None

    header = [str(c) for c in frame.columns]
    if header != columns:
        raise CohortLoadError(
            path, 1, None, f"unexpected header {header}, expected {columns}"
        )

    return [(index + 2, record) for index, record in enumerate(frame.to_dict("records"))]


def _parse(path: PathLike, columns: List[str], convert: Callable[[Row, PathLike, int], T]) -> List[T]:
    return [convert(row, path, line) for line, row in _read_rows(path, columns)]


def integrity_violations(cohort: Cohort) -> List[str]:
    """Uniqueness and referential-integrity problems"""
    problems = []
    case_counts = Counter(c.case_id for c in cohort.cases)
    problems += [f"duplicate case_id {cid}" for cid, n in case_counts.items() if n > 1]

    reader_counts = Counter(r.reader_id for r in cohort.readers)
    problems += [f"duplicate reader_id {rid}" for rid, n in reader_counts.items() if n > 1]

    read_counts = Counter((r.case_id, r.reader_id) for r in cohort.reads)
    problems += [
        f"duplicate read case_id={cid} reader_id={rid}"
        for (cid, rid), n in read_counts.items()
        if n > 1
    ]

    for cid in sorted({r.case_id for r in cohort.reads} - set(case_counts)):
        problems.append(f"read references unknown case_id {cid}")
    for rid in sorted({r.reader_id for r in cohort.reads} - set(reader_counts)):
        problems.append(f"read references unknown reader_id {rid}")
    for rid in sorted(cohort.excluded_readers - set(reader_counts)):
        problems.append(f"excluded reader {rid} is not in the panel")
    return problems


def hygiene_violations(cohort: Cohort) -> List[str]:
    """Test-set hygiene: at most one case per patient per dataset"""
    per_patient: Dict[Tuple[str, str], List[str]] = defaultdict(list)
    for case in cohort.cases:
        if case.patient_id:
            per_patient[(case.dataset, case.patient_id)].append(case.case_id)
    return [
        f"patient {patient} has {len(cases)} cases in dataset {dataset}: {', '.join(cases)}"
        for (dataset, patient), cases in per_patient.items()
        if len(cases) > 1
    ]


def load_cohort(cases_path: PathLike, reads_path: PathLike, readers_path: PathLike) -> Cohort:
    """Load and integrity-check the three cohort CSV files"""
    cases = _parse(cases_path, CASE_COLUMNS, to_case)
    reads = _parse(reads_path, READ_COLUMNS, to_read)
    readers = _parse(readers_path, READER_COLUMNS, to_reader)

    cohort = Cohort(cases=tuple(cases), reads=tuple(reads), readers=tuple(readers))
    problems = integrity_violations(cohort)
    if problems:
        raise IntegrityError(problems)

    logger.info(
        "Loaded %d cases (%d positive), %d reads, %d readers from %s",
        len(cases), cohort.n_positive, len(reads), len(readers), cases_path,
    )
    return cohort


def combine_datasets(cohorts: Iterable[Cohort]) -> Cohort:
    """Union of cohorts with disjoint cases; readers may be shared"""
    cohorts = list(cohorts)
    seen: Dict[str, int] = {}
    collisions = []
    for index, cohort in enumerate(cohorts):
        for case in cohort.cases:
            if case.case_id in seen:
                collisions.append(
                    f"case_id {case.case_id} appears in cohorts {seen[case.case_id]} and {index}"
                )
            else:
                seen[case.case_id] = index
    if collisions:
        raise IntegrityError(collisions)

    readers = {}
    for cohort in cohorts:
        for reader in cohort.readers:
            known = readers.setdefault(reader.reader_id, reader)
            if known != reader:
                raise IntegrityError(
                    [f"reader {reader.reader_id} has conflicting metadata across cohorts"]
                )

    return Cohort(
        cases=tuple(c for cohort in cohorts for c in cohort.cases),
        reads=tuple(r for cohort in cohorts for r in cohort.reads),
        readers=tuple(readers.values()),
        excluded_readers=frozenset().union(*(c.excluded_readers for c in cohorts)),
    )


def reader_positive_rates(cohort: Cohort, include_excluded: bool = False) -> Dict[str, float]:
    """Fraction of each reader's reads called TB positive"""
    totals: Counter = Counter()
    positives: Counter = Counter()
    for read in cohort.reads:
        totals[read.reader_id] += 1
        positives[read.reader_id] += read.tb_call

    rates = {}
    for reader_id in cohort.reader_ids(include_excluded=include_excluded):
        if totals[reader_id] == 0:
            logger.warning("Reader %s has no reads; omitted from positive rates", reader_id)
            continue
        rates[reader_id] = positives[reader_id] / totals[reader_id]
    return rates


def detect_outlier_readers(rates: Mapping[str, float]) -> Set[str]:
    """Readers strictly outside the 1.5 x IQR fences of the positive rates"""
    if len(rates) < MIN_READERS_FOR_OUTLIERS:
        raise DegenerateDataError(
            f"outlier detection needs at least {MIN_READERS_FOR_OUTLIERS} readers, got {len(rates)}"
        )
    values = np.array(sorted(rates.values()), dtype=float)
    q1, q3 = np.percentile(values, [25, 75], method="linear")
    iqr = q3 - q1
    lower, upper = q1 - IQR_FENCE * iqr, q3 + IQR_FENCE * iqr
    return {rid for rid, rate in rates.items() if rate < lower or rate > upper}


def apply_outlier_exclusion(cohort: Cohort) -> Tuple[Cohort, Dict[str, Set[str]]]:
    """Detect outlier readers within each reader cohort tag and record them as excluded"""
    rates = reader_positive_rates(cohort, include_excluded=True)
    excluded: Dict[str, Set[str]] = {}
    for tag in cohort.cohort_tags():
        group = {rid: rates[rid] for rid in cohort.reader_ids(True, tag) if rid in rates}
        if len(group) < MIN_READERS_FOR_OUTLIERS:
            logger.info("Skipping outlier detection for %s: %d readers", tag, len(group))
            continue
        outliers = detect_outlier_readers(group)
        excluded[tag] = outliers
        for rid in sorted(outliers):
            logger.warning(
                "Excluding outlier reader %s (%s): positive rate %.4f", rid, tag, rates[rid]
            )

    flagged = frozenset().union(*excluded.values()) if excluded else frozenset()
    return cohort.model_copy(update={"excluded_readers": cohort.excluded_readers | flagged}), excluded


def validate(cohort: Cohort) -> ValidationReport:
    """Report counts, missing attributes and every invariant violation"""
    violations = integrity_violations(cohort) + hygiene_violations(cohort)
    for case in cohort.cases:
        if not 0.0 <= case.dls_tb_score <= 1.0:
            violations.append(f"case {case.case_id} has dls_tb_score outside [0, 1]")

    per_dataset = {}
    for dataset in cohort.datasets:
        labels = [c.tb_label for c in cohort.cases if c.dataset == dataset]
        per_dataset[dataset] = DatasetCounts(
            n_cases=len(labels), n_positive=sum(labels), n_negative=len(labels) - sum(labels)
        )

    n = len(cohort.cases)

    def fraction(missing: Callable[..., bool]) -> float:
        return sum(1 for c in cohort.cases if missing(c)) / n if n else 0.0

    missing = {
        f"{name}_unknown": fraction(lambda c, name=name: getattr(c, name) is None)
        for name in ("dls_abnormal_score", "age", "sex", "hiv_status", "smear_status", "tb_history")
    }
    for symptom in SYMPTOMS:
        missing[f"{symptom}_unknown"] = fraction(
            lambda c, symptom=symptom: symptom in c.unrecorded_symptoms
        )

    return ValidationReport(
        n_cases=n,
        n_positive=cohort.n_positive,
        n_negative=cohort.n_negative,
        n_readers=len(cohort.readers),
        n_excluded_readers=len(cohort.excluded_readers),
        n_reads=len(cohort.reads),
        per_dataset=per_dataset,
        missing=missing,
        violations=violations,
    )
