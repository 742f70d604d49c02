"""
Experiment configuration: one JSON document per run, validated before any
computation. Unknown keys are rejected at every level.
"""

import json
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic import ValidationError as PydanticValidationError

from .backward_solver import SolverConfig
from .errors import ValidationError

SCHEMA_VERSION = 1


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CustomComponent(_Block):
    kind: Literal["custom"]
    name: str
    params: Dict[str, Any] = {}


# -- forward coefficients ---------------------------------------------------


class ZeroCoefficients(_Block):
    kind: Literal["zero"]


class ConstantCoefficients(_Block):
    kind: Literal["constant"]
    drift: List[float]
    sigma: List[List[float]]


class LinearCoefficients(_Block):
    kind: Literal["linear"]
    A: List[List[float]]
    c: List[float]
    sigma: List[List[float]]


Coefficients = Annotated[
    Union[ZeroCoefficients, ConstantCoefficients, LinearCoefficients, CustomComponent], Field(discriminator="kind")
]


# -- initial law --------------------------------------------------------------


class PointInitial(_Block):
    kind: Literal["point"]
    x: List[float]


class GaussianInitial(_Block):
    kind: Literal["gaussian"]
    mean: List[float]
    std: Union[float, List[float]] = 1.0


Initial = Annotated[Union[PointInitial, GaussianInitial, CustomComponent], Field(discriminator="kind")]


# -- driver and terminal -----------------------------------------------------


class ZeroDriver(_Block):
    kind: Literal["zero"]


class ConstantDriver(_Block):
    kind: Literal["constant"]
    c: List[float]


class AffineDriver(_Block):
    kind: Literal["affine"]
    c: List[float]
    a_y: float = 0.0
    a_mean: float = 0.0


Driver = Annotated[Union[ZeroDriver, ConstantDriver, AffineDriver, CustomComponent], Field(discriminator="kind")]


class ConstantTerminal(_Block):
    kind: Literal["constant"]
    c: List[float]
    project: bool = True


class CallTerminal(_Block):
    kind: Literal["call"]
    strike: float = 0.0
    coordinate: int = Field(0, ge=0)
    project: bool = True


class QuadraticTerminal(_Block):
    kind: Literal["quadratic"]
    scale: float = 1.0
    project: bool = True


class AffineTerminal(_Block):
    kind: Literal["affine"]
    A: List[List[float]]
    c: List[float]
    project: bool = True


Terminal = Annotated[
    Union[ConstantTerminal, CallTerminal, QuadraticTerminal, AffineTerminal, CustomComponent],
    Field(discriminator="kind"),
]


# -- obstacle -----------------------------------------------------------------


class AffineObstacle(_Block):
    kind: Literal["affine"]
    alpha: List[float]
    a: float = Field(0.0, ge=0)
    alpha_prime: Optional[List[float]] = None
    b: float = 0.0


class LinearPiece(_Block):
    alpha: List[float]
    offset: float = 0.0


class LawPiece(_Block):
    kind: Literal["linear", "quadratic"]
    coef: float
    center: float = 0.0


class FeaturePiece(_Block):
    kind: Literal["linear", "square"]
    weights: List[float]


class SeparableObstacle(_Block):
    kind: Literal["separable"]
    G: LinearPiece
    h: LawPiece
    phi: FeaturePiece
    beta: float = Field(..., gt=0)
    bound_M: float = Field(..., gt=0)
    lip_L: Optional[float] = Field(None, ge=0)
    delta0: Optional[float] = None


Obstacle = Annotated[Union[AffineObstacle, SeparableObstacle, CustomComponent], Field(discriminator="kind")]


class ProblemBlock(_Block):
    n: int = Field(1, ge=1)
    l: int = Field(1, ge=1)
    d: int = Field(1, ge=1)
    horizon: float = Field(1.0, gt=0)
    coefficients: Coefficients
    initial: Initial
    driver: Driver
    terminal: Terminal
    obstacle: Obstacle

    @model_validator(mode="after")
    def _dimensions(self):
        n, l, d = self.n, self.l, self.d
        problems = []
        co = self.coefficients
        if isinstance(co, ConstantCoefficients):
            if len(co.drift) != l or _shape(co.sigma) != (l, d):
                problems.append(f"constant coefficients need drift of length {l} and sigma {l}x{d}")
        if isinstance(co, LinearCoefficients):
            if _shape(co.A) != (l, l) or len(co.c) != l or _shape(co.sigma) != (l, d):
                problems.append(f"linear coefficients need A {l}x{l}, c of length {l}, sigma {l}x{d}")
        ini = self.initial
        if isinstance(ini, PointInitial) and len(ini.x) != l:
            problems.append(f"point initial law needs x of length {l}")
        if isinstance(ini, GaussianInitial):
            if len(ini.mean) != l or (isinstance(ini.std, list) and len(ini.std) != l):
                problems.append(f"gaussian initial law needs mean (and std vector) of length {l}")
        dr = self.driver
        if isinstance(dr, (ConstantDriver, AffineDriver)) and len(dr.c) != n:
            problems.append(f"driver constant needs length n={n}")
        te = self.terminal
        if isinstance(te, ConstantTerminal) and len(te.c) != n:
            problems.append(f"terminal constant needs length n={n}")
        if isinstance(te, AffineTerminal) and (_shape(te.A) != (n, l) or len(te.c) != n):
            problems.append(f"affine terminal needs A {n}x{l} and c of length {n}")
        if isinstance(te, (CallTerminal, QuadraticTerminal)) and n != 1:
            problems.append(f"{te.kind} terminal is scalar, but n={n}")
        if isinstance(te, CallTerminal) and te.coordinate >= l:
            problems.append(f"call coordinate {te.coordinate} outside the {l}-dimensional state")
        ob = self.obstacle
        if isinstance(ob, AffineObstacle):
            if len(ob.alpha) != n or (ob.alpha_prime is not None and len(ob.alpha_prime) != n):
                problems.append(f"affine obstacle needs alpha and alpha_prime of length n={n}")
        if isinstance(ob, SeparableObstacle) and (len(ob.G.alpha) != n or len(ob.phi.weights) != n):
            problems.append(f"separable obstacle pieces need length n={n}")
        if problems:
            raise ValueError("; ".join(problems))
        return self


def _shape(rows: List[List[float]]):
    return (len(rows), len(rows[0]) if rows else 0) if all(len(r) == len(rows[0]) for r in rows) else None


# -- studies -----------------------------------------------------------------


def _strictly_increasing(values, name):
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError(f"{name} must be strictly increasing")


class PenaltyStudy(_Block):
    kind: Literal["penalty"]
    m_grid: List[float] = Field(..., min_length=3)

    @model_validator(mode="after")
    def _grid(self):
        _strictly_increasing(self.m_grid, "m_grid")
        if self.m_grid[0] <= 0:
            raise ValueError("m_grid entries must be positive")
        return self


class ChaosStudy(_Block):
    kind: Literal["chaos"]
    n_grid: List[int] = Field(..., min_length=2)
    n_ref: int = Field(..., ge=2)

    @model_validator(mode="after")
    def _grid(self):
        _strictly_increasing(self.n_grid, "n_grid")
        if self.n_grid[0] < 1:
            raise ValueError("n_grid entries must be positive")
        if self.n_ref <= max(self.n_grid):
            raise ValueError(f"n_ref={self.n_ref} must exceed every entry of n_grid")
        return self


class StabilityStudy(_Block):
    kind: Literal["stability"]
    eps_grid: List[float] = Field(..., min_length=1)
    perturb: Literal["terminal", "driver"] = "terminal"

    @model_validator(mode="after")
    def _grid(self):
        e = self.eps_grid
        up = all(b > a for a, b in zip(e, e[1:]))
        down = all(b < a for a, b in zip(e, e[1:]))
        if not (up or down):
            raise ValueError("eps_grid must be strictly monotone")
        return self


class QueryBlock(_Block):
    t: float
    x: List[float]


class Radii(_Block):
    dt: float = Field(0.0, ge=0)
    dx: float = Field(0.0, ge=0)
    dlam: float = Field(0.0, ge=0)


class ContinuityBlock(_Block):
    t: float
    x: List[float]
    radii: Radii = Radii()
    scales: List[float] = [1.0, 0.5, 0.25]
    noise_tol: float = Field(1e-2, ge=0)

    @model_validator(mode="after")
    def _scales(self):
        if any(b >= a for a, b in zip(self.scales, self.scales[1:])) or min(self.scales) <= 0:
            raise ValueError("continuity scales must be positive and strictly decreasing")
        return self


class ComplementarityBlock(_Block):
    times: List[float] = Field(..., min_length=1)
    points: List[List[float]] = Field(..., min_length=1)
    eps: float = Field(1e-3, ge=0)
    eps_prime: float = Field(0.0, ge=0)
    kappa: float = Field(1.0, gt=0)


class DecouplingStudy(_Block):
    kind: Literal["decoupling"]
    queries: List[QueryBlock] = []
    continuity: Optional[ContinuityBlock] = None
    complementarity: Optional[ComplementarityBlock] = None


Study = Annotated[
    Union[PenaltyStudy, ChaosStudy, StabilityStudy, DecouplingStudy], Field(discriminator="kind")
]


class AssumptionBlock(_Block):
    n_samples: int = Field(256, ge=1)
    half_width: float = Field(3.0, gt=0)
    center: Optional[List[float]] = None
    min_atoms: int = Field(1, ge=1)
    max_atoms: int = Field(8, ge=1, le=64)
    tol: Optional[float] = Field(None, ge=0)
    seed: int = Field(0, ge=0)


class OutputBlock(_Block):
    directory: str = "runs/default"
    formats: List[Literal["json", "csv"]] = ["json", "csv"]


class ExperimentConfig(_Block):
    schema_version: Literal[1] = SCHEMA_VERSION
    name: str = "experiment"
    problem: ProblemBlock
    solver: SolverConfig
    study: Optional[Study] = None
    assumptions: AssumptionBlock = AssumptionBlock()
    output: OutputBlock = OutputBlock()

    @model_validator(mode="before")
    @classmethod
    def _solver_horizon(cls, data: Any):
        if not isinstance(data, dict):
            return data
        problem, solver = data.get("problem"), data.get("solver")
        if isinstance(problem, dict) and isinstance(solver, dict):
            horizon = problem.get("horizon", 1.0)
            if "horizon" in solver and float(solver["horizon"]) != float(horizon):
                raise ValueError("solver.horizon disagrees with problem.horizon")
            data = dict(data, solver=dict(solver, horizon=horizon))
        return data

    @model_validator(mode="after")
    def _query_dims(self):
        if isinstance(self.study, DecouplingStudy):
            l = self.problem.l
            points = [q.x for q in self.study.queries]
            if self.study.continuity:
                points.append(self.study.continuity.x)
            if self.study.complementarity:
                points.extend(self.study.complementarity.points)
            if any(len(p) != l for p in points):
                raise ValueError(f"decoupling query points must have length l={l}")
        return self


def format_validation_error(e: PydanticValidationError) -> str:
    parts = []
    for err in e.errors():
        loc = ".".join(str(p) for p in err["loc"])
        parts.append(f"{loc}: {err['msg']}" if loc else err["msg"])
    return "; ".join(parts)


def parse_config(data: Dict[str, Any], source: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except PydanticValidationError as e:
        raise ValidationError(f"invalid config {source}: {format_validation_error(e)}") from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ValidationError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"config {path} is not valid JSON: {e}") from e
    return parse_config(data, str(path))


__all__ = [
    "SCHEMA_VERSION",
    "ExperimentConfig",
    "ProblemBlock",
    "AssumptionBlock",
    "OutputBlock",
    "PenaltyStudy",
    "ChaosStudy",
    "StabilityStudy",
    "DecouplingStudy",
    "CustomComponent",
    "parse_config",
    "load_config",
]
