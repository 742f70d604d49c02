"""
Gradient flows that move a point, or a whole particle cloud, into the
feasible set {H >= 0}.

The single-point flow follows y' = grad_y H(y, delta_y). The particle flow
moves every infeasible particle along grad_y H(x_i, mu_N) under the shared
empirical measure and freezes each one at its own first feasibility time.
Frozen particles keep their positions in the measure.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import FeasibilityError, ValidationError
from .measure import EmpiricalMeasure, as_point
from .obstacle import ObstacleFunctional

logger = logging.getLogger(__name__)

DEFAULT_FEAS_TOL = 1e-9
DEFAULT_MAX_ROUNDS = 5


@dataclass
class FlowResult:
    endpoints: np.ndarray
    stop_times: np.ndarray
    certificates: np.ndarray
    dt_flow: float
    rounds: int = 0
    progress_ok: bool = True

    @property
    def endpoint(self) -> np.ndarray:
        return self.endpoints[0]

    @property
    def stop_time(self) -> float:
        return float(self.stop_times[0])

    @property
    def certificate(self) -> float:
        return float(self.certificates[0])

    @property
    def moved(self) -> bool:
        return bool(np.any(self.stop_times > 0))


def default_dt_flow(worst_deficit: float, beta: float) -> float:
    return 1e-3 * (1.0 + worst_deficit / beta**2)


def _resolve_steps(H, worst_deficit, dt_flow, max_t):
    if dt_flow is None:
        dt_flow = default_dt_flow(worst_deficit, H.beta)
    if not dt_flow > 0:
        raise ValidationError(f"dt_flow must be positive, got {dt_flow}")
    if max_t is None:
        max_t = 10.0 * (1.0 + worst_deficit / H.beta**2)
    if max_t < 0:
        raise ValidationError(f"max_t must be nonnegative, got {max_t}")
    return float(dt_flow), float(max_t), int(np.floor(max_t / dt_flow + 1e-9))


def _at_dirac(H: ObstacleFunctional, y: np.ndarray) -> float:
    cloud = y[None, :]
    return float(H.evaluate(cloud, EmpiricalMeasure(cloud))[0])


def flow_to_feasible_point(
    H: ObstacleFunctional,
    y0,
    dt_flow: Optional[float] = None,
    max_t: Optional[float] = None,
    feas_tol: float = DEFAULT_FEAS_TOL,
) -> FlowResult:
    """Explicit Euler on y' = grad_y H(y, delta_y) until H(y, delta_y) >= -feas_tol."""
    y = as_point(y0).copy()
    h = _at_dirac(H, y)
    deficit = max(0.0, -h)
    dt_flow, max_t, budget = _resolve_steps(H, deficit, dt_flow, max_t)
    progress_floor = H.beta**2 * dt_flow - 4.0 * H.bound_M**3 * dt_flow**2

    steps = 0
    progress_ok = True
    while h < -feas_tol:
        if steps >= budget:
            raise FeasibilityError(
                f"no feasible point reached within max_t={max_t} (H={h:.6g}); "
                "check that beta is declared correctly and the sign condition holds"
            )
        cloud = y[None, :]
        y = y + dt_flow * H.gradient(cloud, EmpiricalMeasure(cloud))[0]
        steps += 1
        h_next = _at_dirac(H, y)
        if h_next - h < progress_floor and progress_ok:
            progress_ok = False
            logger.warning("flow progress %.3g below the beta^2 dt floor %.3g at step %d", h_next - h, progress_floor, steps)
        h = h_next

    t_star = steps * dt_flow
    if t_star > deficit / H.beta**2 + dt_flow * (1 + 1e-9):
        raise FeasibilityError(
            f"flow stopped at t*={t_star:.6g}, beyond the bound H^-/beta^2 + dt = {deficit / H.beta**2 + dt_flow:.6g}"
        )
    return FlowResult(
        endpoints=y[None, :],
        stop_times=np.array([t_star]),
        certificates=np.array([h]),
        dt_flow=dt_flow,
        rounds=1 if steps else 0,
        progress_ok=progress_ok,
    )


def project_terminal_particles(
    H: ObstacleFunctional,
    xi,
    dt_flow: Optional[float] = None,
    max_t: Optional[float] = None,
    feas_tol: float = DEFAULT_FEAS_TOL,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
) -> FlowResult:
    """
    Coupled particle flow with per-particle freezing and re-verification rounds.

    The distance bound |xi_hat_i - xi_i| <= M t*_i raises FeasibilityError, as
    in the single-point flow. The stop-time bound t*_i <= H^-_i / beta^2 + dt
    only logs a warning here. A particle's deficit is measured against the
    starting cloud, but the law keeps moving while it flows. Under the sign
    condition the other particles' motion only speeds it up. Without it, or
    after a re-verification round restarts a frozen particle, the cumulative
    stop time is no longer covered by the starting deficit even though every
    returned certificate is valid.
    """
    start = xi.atoms if isinstance(xi, EmpiricalMeasure) else np.asarray(xi, dtype=float)
    if start.ndim == 1:
        start = start[:, None]
    Y = np.array(start, dtype=float)
    h = H.evaluate(Y, EmpiricalMeasure(Y))
    deficits = np.maximum(0.0, -h)
    dt_flow, max_t, budget = _resolve_steps(H, float(deficits.max()), dt_flow, max_t)

    stop = np.zeros(Y.shape[0])
    active = h < -feas_tol
    rounds = 0
    steps = 0
    while np.any(active):
        rounds += 1
        if rounds > max_rounds:
            raise FeasibilityError(
                f"{int(active.sum())} particles still infeasible after {max_rounds} re-verification rounds"
            )
        if rounds > 1:
            logger.warning("round %d: %d frozen particles lost feasibility, resuming their flow", rounds, int(active.sum()))
        while np.any(active):
            if steps >= budget:
                raise FeasibilityError(
                    f"particle projection exceeded max_t={max_t} with {int(active.sum())} particles infeasible; "
                    "check beta and the sign condition"
                )
            grad = H.gradient(Y, EmpiricalMeasure(Y))
            Y[active] += dt_flow * grad[active]
            stop[active] += dt_flow
            steps += 1
            h = H.evaluate(Y, EmpiricalMeasure(Y))
            active &= h < -feas_tol
        h = H.evaluate(Y, EmpiricalMeasure(Y))
        active = h < -feas_tol

    travelled = np.linalg.norm(Y - start, axis=1)
    if np.any(travelled > H.bound_M * stop * (1 + 1e-9) + 1e-12):
        i = int(np.argmax(travelled - H.bound_M * stop))
        raise FeasibilityError(
            f"particle {i} moved {travelled[i]:.6g}, more than M * t* = {H.bound_M * stop[i]:.6g}"
        )
    late = stop > deficits / H.beta**2 + dt_flow * (1 + 1e-9)
    if np.any(late):
        logger.warning("%d particles exceeded the stop-time bound H^-/beta^2 + dt", int(late.sum()))

    return FlowResult(
        endpoints=Y,
        stop_times=stop,
        certificates=h,
        dt_flow=dt_flow,
        rounds=rounds,
    )


__all__ = [
    "DEFAULT_FEAS_TOL",
    "FlowResult",
    "default_dt_flow",
    "flow_to_feasible_point",
    "project_terminal_particles",
]
