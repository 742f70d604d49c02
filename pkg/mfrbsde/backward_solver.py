"""
Penalized particle backward scheme.

Backward induction over a shared forward panel. At every step the continuation
value and the diagonal Z are least-squares regressions on a polynomial basis
in X_k, and Y_k solves

    Y = C + dt f(t_k, X, Y, Z, law_X, law_YZ) + dt reflection_increment(H, Y, law_Y, m H^-(Y, law_Y))

by Picard iteration with the penalty evaluated at the current iterate.
"""

import dataclasses
import logging
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Callable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import NumericalError, ValidationError
from .feasibility import FlowResult, flow_to_feasible_point, project_terminal_particles
from .forward_sde import CoefficientSpec, TimeGrid, brownian_panel, simulate_forward
from .measure import EmpiricalMeasure, as_point
from .obstacle import ObstacleFunctional, SampleDomain, check_assumptions, reflection_increment

logger = logging.getLogger(__name__)

DriverFn = Callable[[float, np.ndarray, np.ndarray, np.ndarray, EmpiricalMeasure, EmpiricalMeasure], np.ndarray]
TerminalFn = Callable[[np.ndarray, EmpiricalMeasure], np.ndarray]

CONTRACTION_WARN = 0.5
MAX_CONDITION = 1e12


# ---------------------------------------------------------------------------
# Problem data
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DriverSpec:
    f: DriverFn
    out_dim: int = 1
    depends_on_z: bool = False
    depends_on_x: bool = False
    name: str = "custom"

    def evaluate(self, t, X, Y, Z, law_x, law_yz) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.f(t, X, Y, Z, law_x, law_yz), dtype=float), Y.shape)

    @classmethod
    def zero(cls, n: int = 1) -> "DriverSpec":
        return cls.constant(np.zeros(n), name="zero")

    @classmethod
    def constant(cls, c, name: str = "constant") -> "DriverSpec":
        c = as_point(c)
        return cls(lambda t, X, Y, Z, lx, lyz: c, c.size, name=name)

    @classmethod
    def affine(cls, c, a_y: float = 0.0, a_mean: float = 0.0) -> "DriverSpec":
        """f = c + a_y y + a_mean E[Y]; the mean is read from the first n columns of law_YZ."""
        c = as_point(c)
        n = c.size

        def f(t, X, Y, Z, law_x, law_yz):
            return c + a_y * Y + a_mean * law_yz.atoms[:, :n].mean(axis=0)

        return cls(f, n, name="affine")


@dataclass(frozen=True, eq=False)
class TerminalSpec:
    g: TerminalFn
    out_dim: int = 1
    project_terminal: bool = True
    name: str = "custom"

    def evaluate(self, X_T: np.ndarray, law_x: EmpiricalMeasure) -> np.ndarray:
        return np.broadcast_to(
            np.asarray(self.g(X_T, law_x), dtype=float).reshape(X_T.shape[0], -1), (X_T.shape[0], self.out_dim)
        )

    @classmethod
    def constant(cls, c, project_terminal: bool = True) -> "TerminalSpec":
        c = as_point(c)
        return cls(lambda X, law: np.tile(c, (X.shape[0], 1)), c.size, project_terminal, "constant")

    @classmethod
    def call(cls, strike: float = 0.0, coordinate: int = 0, project_terminal: bool = True) -> "TerminalSpec":
        return cls(
            lambda X, law: np.maximum(X[:, coordinate] - strike, 0.0)[:, None], 1, project_terminal, "call"
        )

    @classmethod
    def quadratic(cls, scale: float = 1.0, project_terminal: bool = True) -> "TerminalSpec":
        return cls(lambda X, law: scale * np.sum(X**2, axis=1)[:, None], 1, project_terminal, "quadratic")

    @classmethod
    def affine(cls, A, c, project_terminal: bool = True) -> "TerminalSpec":
        c = as_point(c)
        A = np.atleast_2d(np.asarray(A, dtype=float))
        return cls(lambda X, law: X @ A.T + c, c.size, project_terminal, "affine")


def driver_lipschitz_estimate(
    driver: DriverSpec,
    state_dim: int,
    noise_dim: int,
    half_width: float = 3.0,
    n_samples: int = 256,
    rng_seed: int = 0,
) -> float:
    """Largest sampled |f(y1, z1) - f(y2, z2)| / (|y1 - y2| + |z1 - z2|) at fixed (t, x) and laws."""
    rng = np.random.default_rng(rng_seed)
    n = driver.out_dim
    worst = 0.0
    for _ in range(n_samples):
        t = float(rng.uniform())
        X = rng.uniform(-half_width, half_width, size=(1, state_dim))
        y1, y2 = rng.uniform(-half_width, half_width, size=(2, 1, n))
        z1, z2 = rng.uniform(-half_width, half_width, size=(2, 1, n, noise_dim))
        if not driver.depends_on_z:
            z2 = z1
        law_x = EmpiricalMeasure(X)
        law_yz = EmpiricalMeasure(np.hstack([y1, z1.reshape(1, -1)]))
        gap = float(np.linalg.norm(y1 - y2) + np.linalg.norm(z1 - z2))
        diff = driver.evaluate(t, X, y1, z1, law_x, law_yz) - driver.evaluate(t, X, y2, z2, law_x, law_yz)
        worst = max(worst, float(np.linalg.norm(diff)) / gap)
    return worst


class SolverConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_particles: int = Field(..., ge=1)
    horizon: float = Field(1.0, gt=0)
    steps: int = Field(..., ge=1)
    start_time: float = Field(0.0, ge=0)
    penalty: float = Field(..., gt=0)
    picard_iters: int = Field(5, ge=1)
    picard_tol: float = Field(1e-10, ge=0)
    basis_degree: int = Field(3, ge=0)
    ridge: float = Field(1e-8, ge=0)
    seed: int = Field(0, ge=0, lt=2**63)
    feas_tol: float = Field(1e-9, ge=0)
    allow_z_dependence: bool = False
    dt_flow: Optional[float] = Field(None, gt=0)
    max_flow_time: Optional[float] = Field(None, ge=0)
    max_flow_rounds: int = Field(5, ge=1)

    @model_validator(mode="after")
    def _start_before_horizon(self):
        if self.start_time >= self.horizon:
            raise ValueError(f"start_time {self.start_time} must be below the horizon {self.horizon}")
        return self

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.steps, self.start_time)


# ---------------------------------------------------------------------------
# Regression
# ---------------------------------------------------------------------------


class PolynomialBasis:
    """
    Monomials of the standardized state up to `degree`. Coordinates with no
    spread are dropped at fit time; a fully degenerate state collapses the
    basis to the constant.
    """

    def __init__(self, degree: int = 3):
        if degree < 0:
            raise ValidationError(f"basis degree must be >= 0, got {degree}")
        self.degree = degree

    def fit(self, X: np.ndarray) -> "PolynomialBasis":
        X = np.asarray(X, dtype=float)
        self.center_ = X.mean(axis=0)
        spread = X.std(axis=0)
        self.keep_ = np.flatnonzero(spread > 1e-12 * (1.0 + np.abs(self.center_)))
        self.scale_ = spread[self.keep_]
        self.center_ = self.center_[self.keep_]
        degree = self.degree if self.keep_.size else 0
        self.exponents_: List[Tuple[int, ...]] = [
            combo for deg in range(degree + 1) for combo in combinations_with_replacement(range(self.keep_.size), deg)
        ]
        return self

    @property
    def n_features(self) -> int:
        return len(self.exponents_)

    def transform(self, X: np.ndarray) -> np.ndarray:
        Xs = (np.asarray(X, dtype=float)[:, self.keep_] - self.center_) / self.scale_
        out = np.ones((Xs.shape[0], self.n_features))
        for j, combo in enumerate(self.exponents_):
            for c in combo:
                out[:, j] *= Xs[:, c]
        return out

    def fit_transform(self, X: np.ndarray) -> np.ndarray:
        return self.fit(X).transform(X)


@dataclass(frozen=True)
class RegressionFit:
    coef: np.ndarray
    fitted: np.ndarray


def regress_conditional(features: np.ndarray, targets: np.ndarray, ridge: float = 1e-8) -> RegressionFit:
    """
    Ridge least squares of `targets` (N, q) on `features` (N, p). A leading
    column of ones is treated as the intercept and left unpenalized; the
    constant design returns the exact cross-sectional mean.
    """
    A = np.asarray(features, dtype=float)
    B = np.asarray(targets, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    N, p = A.shape
    if B.shape[0] != N:
        raise ValidationError(f"features have {N} rows but targets have {B.shape[0]}")
    if N < p:
        raise ValidationError(f"regression needs at least as many samples as features, got N={N} < p={p}")
    if ridge < 0:
        raise ValidationError(f"ridge must be nonnegative, got {ridge}")

    intercept = bool(np.all(A[:, 0] == 1.0))
    if p == 1 and intercept:
        coef = B.mean(axis=0)[None, :]
        return RegressionFit(coef, np.broadcast_to(coef, B.shape).copy())

    penalty = ridge * np.eye(p)
    if intercept:
        penalty[0, 0] = 0.0
    gram = A.T @ A + penalty
    if np.linalg.cond(gram) > MAX_CONDITION:
        raise NumericalError(
            f"regression design is ill-conditioned (cond > {MAX_CONDITION:.0e}); lower basis_degree or raise ridge"
        )
    try:
        coef = np.linalg.solve(gram, A.T @ B)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"singular regression: {e}; lower basis_degree") from e
    return RegressionFit(coef, A @ coef)


# ---------------------------------------------------------------------------
# Backward scheme
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParticleSolution:
    Y: np.ndarray
    Z: np.ndarray
    k_pen: np.ndarray
    K: np.ndarray
    R: np.ndarray
    X: np.ndarray
    grid: TimeGrid
    config: SolverConfig
    obstacle: ObstacleFunctional
    terminal_flow: Optional[FlowResult] = None

    def __post_init__(self):
        for name in ("Y", "Z", "k_pen", "K", "R", "X"):
            getattr(self, name).setflags(write=False)

    @property
    def penalty(self) -> float:
        return self.config.penalty

    @property
    def n_particles(self) -> int:
        return self.Y.shape[1]

    def law_y(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.Y[k])


def _picard_step(
    C: np.ndarray,
    t: float,
    X: np.ndarray,
    Z: np.ndarray,
    law_x: EmpiricalMeasure,
    driver: DriverSpec,
    H: ObstacleFunctional,
    m: float,
    dt: float,
    iters: int,
    tol: float,
    step: int,
) -> np.ndarray:
    N = C.shape[0]
    Y = C.copy()
    z_flat = Z.reshape(N, -1)
    floor = max(tol, 1e-12 * (1.0 + float(np.max(np.abs(C)))))
    prev = np.inf
    for j in range(iters):
        law_y = EmpiricalMeasure(Y)
        kp = m * np.maximum(0.0, -H.evaluate(Y, law_y))
        drift = driver.evaluate(t, X, Y, Z, law_x, EmpiricalMeasure(np.hstack([Y, z_flat])))
        Y_new = C + dt * drift + dt * reflection_increment(H, Y, law_y, kp)
        if not np.all(np.isfinite(Y_new)):
            raise NumericalError(
                f"Y became non-finite at step {step} (t={t:.6g}); the penalty blew up, reduce m*dt (m={m}, dt={dt:.3g})"
            )
        change = float(np.max(np.abs(Y_new - Y)))
        Y = Y_new
        if change <= tol:
            break
        if j > 0 and change > prev and change > floor:
            raise NumericalError(
                f"Picard iteration does not contract at step {step} (change {prev:.3g} -> {change:.3g}); "
                f"reduce m*dt (m={m}, dt={dt:.3g}) by raising the step count"
            )
        prev = change
    return Y


def _check_driver(driver: DriverSpec, allow_z: bool):
    if driver.depends_on_z:
        if not allow_z:
            raise ValidationError(
                "driver depends on z; z-dependent drivers are experimental, set allow_z_dependence to run them"
            )
        logger.warning("driver '%s' depends on z: well-posedness of the particle system is not established", driver.name)


def solve_penalized(
    coeff: CoefficientSpec,
    driver: DriverSpec,
    terminal: TerminalSpec,
    H: ObstacleFunctional,
    config: SolverConfig,
    x0_cloud,
    workers: int = 1,
) -> ParticleSolution:
    X0 = x0_cloud.atoms if isinstance(x0_cloud, EmpiricalMeasure) else np.asarray(x0_cloud, dtype=float)
    if X0.ndim == 1:
        X0 = X0[:, None]
    N = config.n_particles
    if X0.shape[0] != N:
        raise ValidationError(f"initial cloud has {X0.shape[0]} particles, config asks for {N}")
    if terminal.out_dim != driver.out_dim:
        raise ValidationError(f"terminal is {terminal.out_dim}-dimensional but the driver is {driver.out_dim}-dimensional")
    _check_driver(driver, config.allow_z_dependence)

    grid = config.grid
    dt, m = grid.dt, config.penalty
    if m * dt * H.bound_M**2 >= CONTRACTION_WARN:
        logger.warning(
            "m*dt*M^2 = %.3g >= %.1f: Picard may not contract, raise the step count", m * dt * H.bound_M**2, CONTRACTION_WARN
        )
    logger.info("solve: N=%d M=%d m=%g seed=%d obstacle=%s", N, grid.M, m, config.seed, H.name)

    panel = brownian_panel(config.seed, N, grid.M, coeff.noise_dim, dt, workers=workers)
    X = simulate_forward(coeff, X0, grid, panel)
    n = driver.out_dim

    xi = terminal.evaluate(X[-1], EmpiricalMeasure(X[-1])).copy()
    if not np.all(np.isfinite(xi)):
        raise NumericalError("terminal condition is not finite")
    report = check_assumptions(H, SampleDomain(xi.min(axis=0) - 1.0, xi.max(axis=0) + 1.0), n_samples=64)
    if not report.passed:
        logger.warning("obstacle '%s' fails %s on the terminal range; results may not be meaningful", H.name, report.failed())

    flow = None
    if terminal.project_terminal:
        flow = project_terminal_particles(
            H, xi, config.dt_flow, config.max_flow_time, config.feas_tol, config.max_flow_rounds
        )
        if flow.moved:
            logger.info("terminal projection moved %d particles", int(np.count_nonzero(flow.stop_times)))
        xi = flow.endpoints
    elif np.any(H.evaluate(xi, EmpiricalMeasure(xi)) < -config.feas_tol):
        logger.warning("terminal cloud is infeasible and projection is disabled")

    d = coeff.noise_dim
    Y = np.empty((grid.M + 1, N, n))
    Z = np.zeros((grid.M, N, n, d))
    Y[-1] = xi
    times = grid.times
    basis = PolynomialBasis(config.basis_degree)
    for k in range(grid.M - 1, -1, -1):
        design = basis.fit_transform(X[k])
        cont = regress_conditional(design, Y[k + 1], config.ridge).fitted
        centered = (Y[k + 1] - cont)[:, :, None] * panel.increments[k][:, None, :] / dt
        Z[k] = regress_conditional(design, centered.reshape(N, n * d), config.ridge).fitted.reshape(N, n, d)
        Y[k] = _picard_step(
            cont, times[k], X[k], Z[k], EmpiricalMeasure(X[k]), driver, H, m, dt,
            config.picard_iters, config.picard_tol, k,
        )

    k_pen = np.empty((grid.M + 1, N))
    K = np.zeros((grid.M + 1, N))
    R = np.zeros((grid.M + 1, N, n))
    for k in range(grid.M + 1):
        law = EmpiricalMeasure(Y[k])
        k_pen[k] = m * np.maximum(0.0, -H.evaluate(Y[k], law))
        if k < grid.M:
            K[k + 1] = K[k] + k_pen[k] * dt
            R[k + 1] = R[k] + reflection_increment(H, Y[k], law, k_pen[k]) * dt

    logger.debug("solve done: mean Y0=%s mean K_T=%.6g", Y[0].mean(axis=0), K[-1].mean())
    return ParticleSolution(Y=Y, Z=Z, k_pen=k_pen, K=K, R=R, X=X, grid=grid, config=config, obstacle=H, terminal_flow=flow)


@dataclass(frozen=True, eq=False)
class Problem:
    """Everything a solve needs except the numerical knobs; `initial(N, seed)` returns the X_0 cloud."""

    coeff: CoefficientSpec
    driver: DriverSpec
    terminal: TerminalSpec
    obstacle: ObstacleFunctional
    initial: Callable[[int, int], np.ndarray]
    name: str = "problem"

    def solve(self, config: SolverConfig, workers: int = 1) -> ParticleSolution:
        x0 = self.initial(config.n_particles, config.seed)
        return solve_penalized(self.coeff, self.driver, self.terminal, self.obstacle, config, x0, workers=workers)

    def replace(self, **changes) -> "Problem":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class DeterministicPath:
    y: np.ndarray
    k_pen: np.ndarray
    K: np.ndarray
    grid: TimeGrid


def solve_deterministic_reduction(
    driver: DriverSpec,
    H: ObstacleFunctional,
    terminal,
    grid: TimeGrid,
    m: float,
    picard_iters: int = 5,
    picard_tol: float = 1e-10,
    state_dim: int = 1,
    noise_dim: int = 1,
    feas_tol: float = 1e-9,
) -> DeterministicPath:
    """
    Scalar/vector backward path with Z = 0 and mu = delta_y, the exact
    counterpart of the particle scheme when all particles coincide.
    """
    if driver.depends_on_x or driver.depends_on_z:
        raise ValidationError("the deterministic reduction needs a driver free of x and z")
    y_T = as_point(terminal)
    if y_T.size != driver.out_dim:
        raise ValidationError(f"terminal has {y_T.size} entries, driver is {driver.out_dim}-dimensional")
    cloud = y_T[None, :]
    if H.evaluate(cloud, EmpiricalMeasure(cloud))[0] < -feas_tol:
        y_T = flow_to_feasible_point(H, y_T, feas_tol=feas_tol).endpoint

    n = y_T.size
    dt = grid.dt
    x = np.zeros((1, state_dim))
    law_x = EmpiricalMeasure(x)
    z = np.zeros((1, n, noise_dim))
    y = np.empty((grid.M + 1, n))
    y[-1] = y_T
    times = grid.times
    for k in range(grid.M - 1, -1, -1):
        y[k] = _picard_step(y[k + 1][None, :], times[k], x, z, law_x, driver, H, m, dt, picard_iters, picard_tol, k)[0]

    # each row sits at its own Dirac measure
    k_pen = np.array([m * max(0.0, -H.evaluate(y[k][None, :], EmpiricalMeasure(y[k][None, :]))[0]) for k in range(grid.M + 1)])
    K = np.concatenate([[0.0], np.cumsum(k_pen[:-1] * dt)])
    return DeterministicPath(y=y, k_pen=k_pen, K=K, grid=grid)


__all__ = [
    "DriverSpec",
    "TerminalSpec",
    "SolverConfig",
    "PolynomialBasis",
    "RegressionFit",
    "ParticleSolution",
    "Problem",
    "DeterministicPath",
    "driver_lipschitz_estimate",
    "regress_conditional",
    "solve_penalized",
    "solve_deterministic_reduction",
]
