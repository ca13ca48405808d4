"""File-based storage: cohort CSVs and the deterministic report bundle"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from ..domain.mapping import (
    CASE_COLUMNS,
    READ_COLUMNS,
    READER_COLUMNS,
    case_to_row,
    read_to_row,
    reader_to_row,
)
from ..domain.models import Cohort, ProvenanceEntry

PathLike = Union[str, Path]


def _jsonable(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    if isinstance(value, Path):
        return value.as_posix()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def dumps(payload: Any) -> str:
    """Canonical JSON: sorted keys, fixed indentation, trailing newline"""
    return json.dumps(payload, indent=2, sort_keys=True, default=_jsonable, allow_nan=False) + "\n"


def digest(payload: Any) -> str:
    return hashlib.sha256(dumps(payload).encode("utf-8")).hexdigest()


def _write_rows(path: Path, rows: Iterable[Mapping[str, Any]], columns: Sequence[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=list(columns))
    frame.to_csv(path, index=False, lineterminator="\n", na_rep="")
    return path


def save_cohort(cohort: Cohort, directory: PathLike) -> Tuple[Path, Path, Path]:
    """Write a cohort as cases.csv, reads.csv and readers.csv"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return (
        _write_rows(directory / "cases.csv", (case_to_row(c) for c in cohort.cases), CASE_COLUMNS),
        _write_rows(directory / "reads.csv", (read_to_row(r) for r in cohort.reads), READ_COLUMNS),
        _write_rows(directory / "readers.csv", (reader_to_row(r) for r in cohort.readers), READER_COLUMNS),
    )


class BundleRepository:
    """Report bundle under one output directory, with a provenance manifest"""

    def __init__(self, out_dir: PathLike) -> None:
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.files: List[str] = []
        self.provenance: List[ProvenanceEntry] = []

    def _path(self, relative: str) -> Path:
        path = self.out_dir / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        if relative not in self.files:
            self.files.append(relative)
        return path

    def write_json(self, relative: str, payload: Any) -> Path:
        path = self._path(relative)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(dumps(payload))
        return path

    def write_csv(self, relative: str, rows: Iterable[Mapping[str, Any]], columns: Sequence[str]) -> Path:
        return _write_rows(self._path(relative), rows, columns)

    def write_frame(self, relative: str, frame: pd.DataFrame) -> Path:
        path = self._path(relative)
        frame.to_csv(path, index=False, lineterminator="\n", na_rep="")
        return path

    def write_text(self, relative: str, text: str) -> Path:
        path = self._path(relative)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        return path

    def record(
        self,
        output: str,
        key: str,
        operation: str,
        params: Dict[str, Any],
        value: Optional[float],
    ) -> None:
        """Log how one emitted number is recomputed"""
        self.provenance.append(
            ProvenanceEntry(
                output=output,
                key=key,
                operation=operation,
                params=json.loads(dumps(params)),
                value=None if value is None else float(value),
            )
        )

    def write_manifest(self, config_hash: str, seed: int, versions: Dict[str, str]) -> Path:
        # the manifest lists itself
        self._path("manifest.json")
        manifest = {
            "config_hash": config_hash,
            "seed": seed,
            "versions": versions,
            "files": sorted(self.files),
            "provenance": [e.model_dump(mode="json") for e in self.provenance],
        }
        return self.write_json("manifest.json", manifest)

    @staticmethod
    def load_manifest(out_dir: PathLike) -> Dict[str, Any]:
        with open(Path(out_dir) / "manifest.json", "r", encoding="utf-8") as f:
            return json.load(f)
