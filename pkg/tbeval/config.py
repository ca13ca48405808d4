"""Configuration management for tbeval"""

import os
from pathlib import Path
from typing import List, Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator

from .domain.errors import ConfigError
from .domain.models import BootstrapConfig, NoninferiorityConfig, StratumSpec

# Load environment variables from .env file
load_dotenv()


class InputPaths(BaseModel):
    """One dataset's cohort files"""
    cases: Path
    reads: Path
    readers: Path


class NamedThreshold(BaseModel):
    name: str = Field(min_length=1)
    threshold: float = Field(ge=0.0, le=1.0)


def _default_operating_points() -> List[NamedThreshold]:
    return [
        NamedThreshold(name="prespecified", threshold=0.45),
        NamedThreshold(name="high_sensitivity", threshold=0.30),
        NamedThreshold(name="south_africa_alt", threshold=0.685),
    ]


class ScenarioConfig(BaseModel):
    """A fixed (sensitivity, specificity) triage device for the cost analysis"""
    name: str
    sensitivity: float = Field(ge=0.0, le=1.0)
    specificity: float = Field(ge=0.0, le=1.0)


class CostConfig(BaseModel):
    cost_confirmatory_test: float = Field(default=13.06, ge=0.0)
    cost_cxr: float = Field(default=1.49, ge=0.0)
    cost_cad: float = Field(default=0.0, ge=0.0)
    p_min: float = 0.01
    p_max: float = 0.10
    step: float = 0.01
    # measured scenario; None takes the primary operating point on the combined cohort
    sensitivity: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    specificity: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    reference_scenarios: List[ScenarioConfig] = Field(
        default_factory=lambda: [
            ScenarioConfig(name="who_target", sensitivity=0.90, specificity=0.70),
            ScenarioConfig(name="lower_specificity", sensitivity=0.90, specificity=0.65),
        ]
    )


class AbnormalityConfig(BaseModel):
    ground_truth_readers: List[str] = Field(default_factory=list)
    dataset: Optional[str] = None


class RunConfig(BaseModel):
    """Analysis run loaded from YAML; CLI flags override out_dir and seed"""
    inputs: List[InputPaths] = Field(default_factory=list)
    operating_points: List[NamedThreshold] = Field(default_factory=_default_operating_points)
    primary_operating_point: str = "prespecified"
    primary_reader_cohort: str = "india_based"
    comparison_reader_cohort: Optional[str] = "us_based"
    exclude_outliers: bool = True
    include_excluded_readers: bool = False
    noninferiority: NoninferiorityConfig = Field(default_factory=NoninferiorityConfig)
    bootstrap: BootstrapConfig = Field(default_factory=BootstrapConfig)
    strata: List[StratumSpec] = Field(default_factory=list)
    age_band_edges: Optional[List[int]] = None
    abnormality: AbnormalityConfig = Field(default_factory=AbnormalityConfig)
    cost: CostConfig = Field(default_factory=CostConfig)
    out_dir: Optional[Path] = None
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _operating_points(self) -> "RunConfig":
        names = [p.name for p in self.operating_points]
        if len(names) != len(set(names)):
            raise ValueError(f"operating point names must be unique: {names}")
        if self.primary_operating_point not in names:
            raise ValueError(
                f"primary operating point {self.primary_operating_point!r} is not among {names}"
            )
        return self

    def threshold(self, name: str) -> float:
        for point in self.operating_points:
            if point.name == name:
                return point.threshold
        raise ConfigError(f"unknown operating point {name!r}")

    @property
    def primary_threshold(self) -> float:
        return self.threshold(self.primary_operating_point)


class Config:
    """Application configuration"""

    def __init__(self) -> None:
        self.log_level = os.getenv("TBEVAL_LOG_LEVEL", "INFO")
        self.out_dir = Path(os.getenv("TBEVAL_OUT_DIR", "out"))
        self.seed = int(os.getenv("TBEVAL_SEED", "20210401"))
        self.config_file = Path(os.getenv("TBEVAL_CONFIG", "analysis.yaml"))
        self.debug = os.getenv("TBEVAL_DEBUG", "false").lower() == "true"

    def load_run_config(self, path: Optional[Path] = None) -> RunConfig:
        """Load the run configuration, falling back to defaults when no file exists"""
        path = path or self.config_file
        if not path.exists():
            if path != self.config_file:
                raise ConfigError(f"Config file not found: {path}")
            return RunConfig()
        return load_run_config(path)


def load_run_config(path: Path) -> RunConfig:
    """Parse a YAML run configuration; relative input paths resolve against its directory"""
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")

    try:
        run = RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from None

    base = path.parent
    inputs = [
        InputPaths(
            cases=base / item.cases,
            reads=base / item.reads,
            readers=base / item.readers,
        )
        for item in run.inputs
    ]
    return run.model_copy(update={"inputs": inputs})


# Global config instance
config = Config()
