"""
Builds solver components from validated config blocks. Built-in kinds are
handled here; anything else is looked up among the factories registered with
the ``register_*`` decorators and selected with ``{"kind": "custom", "name": ...}``.
"""

import logging
from typing import Any, Callable, Dict

import numpy as np

from .backward_solver import DriverSpec, Problem, TerminalSpec
from .config import (
    AffineDriver,
    AffineObstacle,
    AffineTerminal,
    CallTerminal,
    ConstantCoefficients,
    ConstantDriver,
    ConstantTerminal,
    CustomComponent,
    ExperimentConfig,
    GaussianInitial,
    LinearCoefficients,
    PointInitial,
    ProblemBlock,
    QuadraticTerminal,
    SeparableObstacle,
    ZeroCoefficients,
    ZeroDriver,
)
from .errors import ValidationError
from .forward_sde import CoefficientSpec, gaussian_cloud, point_cloud
from .obstacle import ObstacleFunctional, SampleDomain, make_affine, make_separable

logger = logging.getLogger(__name__)

_REGISTRIES: Dict[str, Dict[str, Callable[..., Any]]] = {
    "coefficients": {},
    "initial": {},
    "driver": {},
    "terminal": {},
    "obstacle": {},
}


def _register(kind: str, name: str):
    def deco(factory):
        if name in _REGISTRIES[kind]:
            logger.warning("replacing registered %s '%s'", kind, name)
        _REGISTRIES[kind][name] = factory
        return factory

    return deco


def register_coefficients(name: str):
    return _register("coefficients", name)


def register_initial(name: str):
    return _register("initial", name)


def register_driver(name: str):
    return _register("driver", name)


def register_terminal(name: str):
    return _register("terminal", name)


def register_obstacle(name: str):
    return _register("obstacle", name)


def _custom(kind: str, block: CustomComponent, expected: type):
    factory = _REGISTRIES[kind].get(block.name)
    if factory is None:
        known = sorted(_REGISTRIES[kind])
        raise ValidationError(f"unknown custom {kind} '{block.name}'; registered: {known}")
    built = factory(**block.params)
    if not isinstance(built, expected):
        raise ValidationError(f"custom {kind} '{block.name}' returned {type(built).__name__}, expected {expected.__name__}")
    return built


def build_coefficients(block, l: int = 1, d: int = 1) -> CoefficientSpec:
    if isinstance(block, ZeroCoefficients):
        return CoefficientSpec.zero(l, d)
    if isinstance(block, ConstantCoefficients):
        return CoefficientSpec.constant(block.drift, block.sigma)
    if isinstance(block, LinearCoefficients):
        return CoefficientSpec.linear(block.A, block.c, block.sigma)
    return _custom("coefficients", block, CoefficientSpec)


def build_initial(block) -> Callable[[int, int], np.ndarray]:
    if isinstance(block, PointInitial):
        x = np.asarray(block.x, dtype=float)
        return lambda N, seed: point_cloud(x, N)
    if isinstance(block, GaussianInitial):
        mean, std = block.mean, block.std
        return lambda N, seed: gaussian_cloud(mean, std, N, seed)
    factory = _REGISTRIES["initial"].get(block.name)
    if factory is None:
        raise ValidationError(f"unknown custom initial law '{block.name}'; registered: {sorted(_REGISTRIES['initial'])}")
    sampler = factory(**block.params)
    if not callable(sampler):
        raise ValidationError(f"custom initial law '{block.name}' must return a callable (N, seed) -> cloud")
    return sampler


def build_driver(block, n: int) -> DriverSpec:
    if isinstance(block, ZeroDriver):
        return DriverSpec.zero(n)
    if isinstance(block, ConstantDriver):
        return DriverSpec.constant(block.c)
    if isinstance(block, AffineDriver):
        return DriverSpec.affine(block.c, block.a_y, block.a_mean)
    return _custom("driver", block, DriverSpec)


def build_terminal(block) -> TerminalSpec:
    if isinstance(block, ConstantTerminal):
        return TerminalSpec.constant(block.c, block.project)
    if isinstance(block, CallTerminal):
        return TerminalSpec.call(block.strike, block.coordinate, block.project)
    if isinstance(block, QuadraticTerminal):
        return TerminalSpec.quadratic(block.scale, block.project)
    if isinstance(block, AffineTerminal):
        return TerminalSpec.affine(block.A, block.c, block.project)
    return _custom("terminal", block, TerminalSpec)


def _separable(block: SeparableObstacle) -> ObstacleFunctional:
    alpha = np.asarray(block.G.alpha, dtype=float)
    offset = block.G.offset
    n = alpha.size
    w = np.asarray(block.phi.weights, dtype=float)
    coef, center = block.h.coef, block.h.center

    if block.h.kind == "linear":
        h, dh = (lambda s: coef * s), (lambda s: coef)
    else:
        h, dh = (lambda s: coef * (s - center) ** 2), (lambda s: 2.0 * coef * (s - center))

    if block.phi.kind == "linear":
        phi = lambda v: v @ w
        grad_phi = lambda v: np.broadcast_to(w, v.shape).copy()
        hess_phi = lambda v: np.zeros((v.shape[0], n, n))
    else:
        phi = lambda v: (v**2) @ w
        grad_phi = lambda v: 2.0 * v * w
        hess_phi = lambda v: np.broadcast_to(np.diag(2.0 * w), (v.shape[0], n, n)).copy()

    return make_separable(
        G=lambda y: y @ alpha + offset,
        grad_G=lambda y: np.broadcast_to(alpha, y.shape).copy(),
        h=h,
        dh=dh,
        phi=phi,
        grad_phi=grad_phi,
        hess_G=lambda y: np.zeros((y.shape[0], n, n)),
        hess_phi=hess_phi,
        beta=block.beta,
        bound_M=block.bound_M,
        lip_L=block.lip_L,
        delta0=block.delta0,
        name=f"separable[{block.h.kind},{block.phi.kind}]",
    )


def build_obstacle(block) -> ObstacleFunctional:
    if isinstance(block, AffineObstacle):
        alpha_prime = block.alpha_prime if block.alpha_prime is not None else [0.0] * len(block.alpha)
        return make_affine(block.alpha, block.a, alpha_prime, block.b)
    if isinstance(block, SeparableObstacle):
        return _separable(block)
    return _custom("obstacle", block, ObstacleFunctional)


def build_problem(problem: ProblemBlock, name: str = "problem") -> Problem:
    coeff = build_coefficients(problem.coefficients, problem.l, problem.d)
    if (coeff.state_dim, coeff.noise_dim) != (problem.l, problem.d):
        raise ValidationError(
            f"coefficients are {coeff.state_dim}x{coeff.noise_dim}, the problem declares l={problem.l}, d={problem.d}"
        )
    driver = build_driver(problem.driver, problem.n)
    terminal = build_terminal(problem.terminal)
    if driver.out_dim != problem.n or terminal.out_dim != problem.n:
        raise ValidationError(f"driver and terminal must both be {problem.n}-dimensional")
    return Problem(
        coeff=coeff,
        driver=driver,
        terminal=terminal,
        obstacle=build_obstacle(problem.obstacle),
        initial=build_initial(problem.initial),
        name=name,
    )


def sample_domain(cfg: ExperimentConfig) -> SampleDomain:
    a = cfg.assumptions
    return SampleDomain.box(cfg.problem.n, a.half_width, a.center, min_atoms=a.min_atoms, max_atoms=a.max_atoms)


__all__ = [
    "register_coefficients",
    "register_initial",
    "register_driver",
    "register_terminal",
    "register_obstacle",
    "build_coefficients",
    "build_initial",
    "build_driver",
    "build_terminal",
    "build_obstacle",
    "build_problem",
    "sample_domain",
]
