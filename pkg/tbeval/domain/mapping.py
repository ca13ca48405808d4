"""Mapping between cohort CSV rows and domain models"""

import math
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Type, TypeVar, Union

from pydantic import ValidationError

from .errors import CohortLoadError
from .models import SYMPTOMS, CaseRecord, ReaderInfo, ReaderRead

CASE_COLUMNS = [
    "case_id",
    "dataset",
    "patient_id",
    "tb_label",
    "dls_tb_score",
    "dls_abnormal_score",
    "age",
    "sex",
    "hiv_status",
    "smear_status",
    "tb_history",
    *SYMPTOMS,
]
READ_COLUMNS = ["case_id", "reader_id", "tb_call", "abnormal_call", "technical_issue"]
READER_COLUMNS = ["reader_id", "cohort_tag", "years_experience"]

Row = Dict[str, str]
PathLike = Union[str, Path]
M = TypeVar("M", CaseRecord, ReaderRead, ReaderInfo)


class _RowParser:
    """Field parsers that report the offending file, line and column"""

    def __init__(self, path: PathLike, line: int, row: Row) -> None:
        self.path = path
        self.line = line
        self.row = row

    def fail(self, column: str, reason: str) -> CohortLoadError:
        return CohortLoadError(self.path, self.line, column, reason)

    def raw(self, column: str) -> str:
        return self.row[column].strip()

    def text(self, column: str) -> str:
        value = self.raw(column)
        if not value:
            raise self.fail(column, "required value is empty")
        return value

    def binary(self, column: str) -> Optional[int]:
        value = self.raw(column)
        if value == "":
            return None
        if value not in ("0", "1"):
            raise self.fail(column, f"expected 0 or 1, got {value!r}")
        return int(value)

    def required_binary(self, column: str) -> int:
        value = self.binary(column)
        if value is None:
            raise self.fail(column, "required value is empty")
        return value

    def real(self, column: str) -> Optional[float]:
        value = self.raw(column)
        if value == "":
            return None
        try:
            number = float(value)
        except ValueError:
            raise self.fail(column, f"unparseable number {value!r}") from None
        if not math.isfinite(number):
            raise self.fail(column, f"non-finite number {value!r}")
        return number

    def score(self, column: str, required: bool) -> Optional[float]:
        number = self.real(column)
        if number is None:
            if required:
                raise self.fail(column, "required value is empty")
            return None
        if not 0.0 <= number <= 1.0:
            raise self.fail(column, f"score {number} outside [0, 1]")
        return number

    def count(self, column: str) -> Optional[int]:
        value = self.raw(column)
        if value == "":
            return None
        try:
            number = int(value)
        except ValueError:
            raise self.fail(column, f"expected a non-negative integer, got {value!r}") from None
        if number < 0:
            raise self.fail(column, f"expected a non-negative integer, got {value!r}")
        return number

    def choice(self, column: str, allowed: Sequence[str]) -> Optional[str]:
        value = self.raw(column).lower()
        if value in ("", "unknown"):
            return None
        if value not in allowed:
            raise self.fail(column, f"expected one of {sorted(allowed)}, got {value!r}")
        return value

    def required_choice(self, column: str, allowed: Sequence[str]) -> str:
        value = self.choice(column, allowed)
        if value is None:
            raise self.fail(column, "required value is empty")
        return value


def _build(parser: _RowParser, model: Type[M], **fields: Any) -> M:
    try:
        return model(**fields)
    except ValidationError as e:
        error = e.errors()[0]
        column = str(error["loc"][0]) if error["loc"] else None
        raise parser.fail(column or "", error["msg"]) from None


def to_case(row: Row, path: PathLike, line: int) -> CaseRecord:
    """Convert a cases.csv row to a CaseRecord"""
    p = _RowParser(path, line, row)
    present, unrecorded = set(), set()
    for symptom in SYMPTOMS:
        flag = p.binary(symptom)
        if flag is None:
            unrecorded.add(symptom)
        elif flag:
            present.add(symptom)
    history = p.binary("tb_history")
    return _build(
        p,
        CaseRecord,
        case_id=p.text("case_id"),
        dataset=p.text("dataset"),
        patient_id=p.raw("patient_id"),
        tb_label=p.required_binary("tb_label"),
        dls_tb_score=p.score("dls_tb_score", required=True),
        dls_abnormal_score=p.score("dls_abnormal_score", required=False),
        age=p.count("age"),
        sex=p.choice("sex", ("female", "male")),
        hiv_status=p.choice("hiv_status", ("positive", "negative")),
        smear_status=p.choice("smear_status", ("positive", "negative")),
        tb_history=None if history is None else bool(history),
        symptoms=frozenset(present),
        unrecorded_symptoms=frozenset(unrecorded),
    )


def to_read(row: Row, path: PathLike, line: int) -> ReaderRead:
    """Convert a reads.csv row to a ReaderRead"""
    p = _RowParser(path, line, row)
    issue = p.required_binary("technical_issue")
    return _build(
        p,
        ReaderRead,
        case_id=p.text("case_id"),
        reader_id=p.text("reader_id"),
        tb_call=p.required_binary("tb_call"),
        abnormal_call=p.binary("abnormal_call"),
        technical_issue=bool(issue),
    )


def to_reader(row: Row, path: PathLike, line: int) -> ReaderInfo:
    """Convert a readers.csv row to a ReaderInfo"""
    p = _RowParser(path, line, row)
    tag = p.required_choice("cohort_tag", ("india_based", "us_based", "other"))
    return _build(
        p,
        ReaderInfo,
        reader_id=p.text("reader_id"),
        cohort_tag=tag,
        years_experience=p.count("years_experience"),
    )


def _fmt(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    return str(value)


def case_to_row(case: CaseRecord) -> Row:
    """Convert a CaseRecord back to a cases.csv row"""
    row = {
        "case_id": case.case_id,
        "dataset": case.dataset,
        "patient_id": case.patient_id,
        "tb_label": _fmt(case.tb_label),
        "dls_tb_score": _fmt(case.dls_tb_score),
        "dls_abnormal_score": _fmt(case.dls_abnormal_score),
        "age": _fmt(case.age),
        "sex": _fmt(case.sex),
        "hiv_status": _fmt(case.hiv_status),
        "smear_status": _fmt(case.smear_status),
        "tb_history": _fmt(case.tb_history),
    }
    for symptom in SYMPTOMS:
        if symptom in case.unrecorded_symptoms:
            row[symptom] = ""
        else:
            row[symptom] = "1" if symptom in case.symptoms else "0"
    return row


def read_to_row(read: ReaderRead) -> Row:
    return {
        "case_id": read.case_id,
        "reader_id": read.reader_id,
        "tb_call": _fmt(read.tb_call),
        "abnormal_call": _fmt(read.abnormal_call),
        "technical_issue": _fmt(read.technical_issue),
    }


def reader_to_row(reader: ReaderInfo) -> Row:
    return {
        "reader_id": reader.reader_id,
        "cohort_tag": reader.cohort_tag,
        "years_experience": _fmt(reader.years_experience),
    }
