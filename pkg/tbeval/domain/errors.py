"""Exception types raised by tbeval"""

from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union


class TbEvalError(ValueError):
    """Base class for data and analysis errors"""


class ConfigError(TbEvalError):
    """Invalid run configuration"""


class CohortLoadError(TbEvalError):
    """A row in one of the cohort CSV files could not be parsed"""

    def __init__(
        self,
        path: Union[str, Path],
        line: Optional[int],
        column: Optional[str],
        reason: str,
    ) -> None:
        self.path = str(path)
        self.line = line
        self.column = column
        self.reason = reason
        where = f"{self.path}:{line}" if line is not None else self.path
        if column:
            where += f": column '{column}'"
        super().__init__(f"{where}: {reason}")


class IntegrityError(TbEvalError):
    """Duplicate identifiers or dangling references"""

    def __init__(self, problems: Iterable[str]) -> None:
        self.problems: List[str] = list(problems)
        shown = "; ".join(self.problems[:5])
        more = f" (+{len(self.problems) - 5} more)" if len(self.problems) > 5 else ""
        super().__init__(f"Integrity error: {shown}{more}")


class DegenerateDataError(TbEvalError):
    """Data cannot support the requested computation"""


class IncompleteDesignError(DegenerateDataError):
    """A reader is missing reads on cases of a complete-block design"""

    def __init__(self, gaps: Iterable[Tuple[str, str]]) -> None:
        self.gaps: List[Tuple[str, str]] = sorted(gaps)
        listed = ", ".join(f"{r}/{c}" for r, c in self.gaps[:10])
        more = f" (+{len(self.gaps) - 10} more)" if len(self.gaps) > 10 else ""
        super().__init__(f"Missing reads (reader/case): {listed}{more}")
