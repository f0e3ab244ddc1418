"""Experiment configuration (JSON) with strict validation.

Every section rejects unknown keys, so a typo fails loudly with the path of
the offending field instead of silently falling back to a default.
"""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from tems.model import MODELS

SchemeKind = Literal["tems", "tube", "multi_stage"]
AdditiveMode = Literal["uniform", "constant_lower", "constant_upper"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the field path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    name: str
    params: dict[str, Union[float, list[float]]] = Field(default_factory=dict)
    input_bounds: list[tuple[float, float]] = Field(min_length=1)

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        if v not in MODELS:
            raise ValueError(f"unknown model {v!r}; known: {sorted(MODELS)}")
        return v

    @field_validator("input_bounds")
    @classmethod
    def _ordered(cls, v):
        if any(lo > hi for lo, hi in v):
            raise ValueError("each input bound needs lower <= upper")
        return v


class UncertaintySection(_Strict):
    """Overrides of the model's uncertainty declaration (``None`` keeps the model's)."""

    nominal: list[float] | None = None
    lower: list[float] | None = None
    upper: list[float] | None = None
    significant: list[bool] | None = None


class TreeSection(_Strict):
    N: int = Field(10, ge=1)
    N_R: int = Field(1, ge=1)
    values_per_dim: Literal[2, 3] = 3


class PrimaryCostSection(_Strict):
    """Primary stage cost: the model's own or a diagonal quadratic."""

    kind: Literal["model", "quadratic"] = "model"
    move_weights: list[float] | None = None
    q: list[float] | None = None
    r: list[float] | None = None

    @model_validator(mode="after")
    def _quadratic_weights(self):
        if self.kind == "quadratic" and (self.q is None or self.r is None):
            raise ValueError("a quadratic primary cost needs both q and r")
        return self


class AncillarySection(_Strict):
    mode: Literal["full_tree", "nominal_only"] = "nominal_only"
    Q: list[float] = Field(min_length=1)
    R: list[float] = Field(min_length=1)
    P: list[float] | None = None

    @field_validator("Q", "R", "P")
    @classmethod
    def _nonnegative(cls, v):
        if v is not None and any(w < 0 for w in v):
            raise ValueError("weights must be nonnegative")
        return v


class EstimatorSection(_Strict):
    kind: Literal["finite", "box"] = "box"
    w_diag: list[float] | None = None
    tol: float = Field(1e-9, gt=0)


class TighteningSection(_Strict):
    """Back-offs: an explicit vector, or a calibration report to read them from."""

    delta: list[float] | None = None
    calibration: str | None = None
    safety_factor: float = Field(1.0, ge=0)
    precision: float | None = Field(1e-4, gt=0)
    max_rounds: int = Field(5, ge=1)
    seeds_per_point: int = Field(2, ge=1)
    master_seed: int = Field(11, ge=0)

    @model_validator(mode="after")
    def _one_source(self):
        if self.delta is not None and self.calibration is not None:
            raise ValueError("give either delta or calibration, not both")
        if self.delta is not None and any(d < 0 for d in self.delta):
            raise ValueError("delta entries must be nonnegative")
        return self


class SolverSection(_Strict):
    tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(100, ge=1)


class TargetSection(_Strict):
    state: str | int
    value: float


class SimulationSection(_Strict):
    max_steps: int = Field(40, ge=1)
    target: TargetSection | None = None
    x0: list[float] | None = None
    violation_tol: float = Field(1e-6, ge=0)


class SchemeSection(_Strict):
    kind: SchemeKind
    name: str | None = None
    tightened: bool = True

    @property
    def label(self) -> str:
        return self.name or self.kind


class GridSection(_Strict):
    counts: dict[str, int] = Field(default_factory=dict)
    seeds_per_point: int = Field(1, ge=1)
    additive_modes: list[AdditiveMode] = Field(default_factory=lambda: ["uniform"], min_length=1)

    @field_validator("counts")
    @classmethod
    def _positive(cls, v):
        for k, c in v.items():
            if c < 1:
                raise ValueError(f"grid count for {k!r} must be positive")
        return v


class ExperimentConfig(_Strict):
    """Complete description of an experiment."""

    model: ModelSection
    uncertainty: UncertaintySection = Field(default_factory=UncertaintySection)
    tree: TreeSection = Field(default_factory=TreeSection)
    primary_cost: PrimaryCostSection = Field(default_factory=PrimaryCostSection)
    ancillary: AncillarySection
    estimator: EstimatorSection = Field(default_factory=EstimatorSection)
    tightening: TighteningSection = Field(default_factory=TighteningSection)
    solver: SolverSection = Field(default_factory=SolverSection)
    simulation: SimulationSection = Field(default_factory=SimulationSection)
    schemes: list[SchemeSection] = Field(min_length=1)
    grid: GridSection = Field(default_factory=GridSection)
    master_seed: int = Field(0, ge=0)
    output_dir: str = "results"

    @model_validator(mode="after")
    def _unique_labels(self):
        labels = [s.label for s in self.schemes]
        if len(set(labels)) != len(labels):
            raise ValueError(f"scheme labels must be unique, got {labels}")
        return self

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        """Short digest of the canonical JSON form."""
        canon = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{path}: {err['msg']}")
    return "; ".join(parts)


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON configuration document."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from None
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def benchmark_config_text() -> str:
    """The shipped benchmark configuration."""
    return resources.files("tems").joinpath("configs/benchmark.json").read_text()


def benchmark_config() -> ExperimentConfig:
    return parse_config(benchmark_config_text())
