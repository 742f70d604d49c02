"""Penalized particle solver for mean-field reflected BSDEs with law-dependent constraints."""

from .backward_solver import DriverSpec, ParticleSolution, Problem, SolverConfig, TerminalSpec, solve_penalized
from .errors import FeasibilityError, MfrbsdeError, NumericalError, ValidationError
from .forward_sde import CoefficientSpec, TimeGrid
from .measure import EmpiricalMeasure
from .obstacle import ObstacleFunctional, check_assumptions, make_affine, make_separable

__version__ = "0.1.0"

__all__ = [
    "CoefficientSpec",
    "DriverSpec",
    "EmpiricalMeasure",
    "FeasibilityError",
    "MfrbsdeError",
    "NumericalError",
    "ObstacleFunctional",
    "ParticleSolution",
    "Problem",
    "SolverConfig",
    "TerminalSpec",
    "TimeGrid",
    "ValidationError",
    "check_assumptions",
    "make_affine",
    "make_separable",
    "solve_penalized",
]
