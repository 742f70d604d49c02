"""
Forward diffusion X = X_0 + int b dt + int sigma dB on a uniform grid, and the
counter-based Brownian panels shared by every arm of an experiment.

Every Gaussian draw comes from a Philox stream keyed by (seed, particle), so a
particle's increments depend neither on N nor on the number of workers.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .errors import NumericalError, ValidationError
from .measure import EmpiricalMeasure, as_point

logger = logging.getLogger(__name__)

DriftFn = Callable[[float, np.ndarray], np.ndarray]
DiffusionFn = Callable[[float, np.ndarray], np.ndarray]

PANEL_STREAM = 0
INITIAL_LAW_STREAM = 1
_SALT_SHIFT = 48
_MAX_SEED = 2**63


@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int
    start: float = 0.0

    def __post_init__(self):
        if not self.T > self.start:
            raise ValidationError(f"time grid needs T > start, got T={self.T}, start={self.start}")
        if int(self.M) != self.M or self.M < 1:
            raise ValidationError(f"step count M must be a positive integer, got {self.M}")
        object.__setattr__(self, "M", int(self.M))

    @property
    def dt(self) -> float:
        return (self.T - self.start) / self.M

    @property
    def times(self) -> np.ndarray:
        t = self.start + np.arange(self.M + 1) * self.dt
        t[-1] = self.T
        return t


# ---------------------------------------------------------------------------
# Counter-based Gaussian streams
# ---------------------------------------------------------------------------


def _check_seed(seed: int) -> int:
    if int(seed) != seed or not 0 <= seed < _MAX_SEED:
        raise ValidationError(f"seed must be an integer in [0, 2**63), got {seed}")
    return int(seed)


def _stream_normals(seed: int, particle: int, count: int, stream: int) -> np.ndarray:
    key = np.array([seed, (stream << _SALT_SHIFT) + particle], dtype=np.uint64)
    raw = np.random.Philox(key=key).random_raw(count)
    uniforms = ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53
    return ndtri(uniforms)


def _normal_block(seed: int, first: int, last: int, count: int, stream: int) -> np.ndarray:
    out = np.empty((last - first, count))
    for r, i in enumerate(range(first, last)):
        out[r] = _stream_normals(seed, i, count, stream)
    return out


def stream_normals(seed: int, n_particles: int, count: int, stream: int = PANEL_STREAM, workers: int = 1) -> np.ndarray:
    """
    ``(n_particles, count)`` standard normals; row i is the prefix of particle i's
    stream. Chunks are generated on a thread pool and concatenated in order.
    """
    seed = _check_seed(seed)
    if n_particles < 1 or count < 1:
        raise ValidationError(f"need at least one particle and one draw, got {n_particles} x {count}")
    workers = max(1, int(workers))
    if workers == 1 or n_particles < 2 * workers:
        return _normal_block(seed, 0, n_particles, count, stream)
    bounds = np.linspace(0, n_particles, workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        blocks = pool.map(
            lambda ab: _normal_block(seed, ab[0], ab[1], count, stream),
            zip(bounds[:-1], bounds[1:]),
        )
        return np.concatenate(list(blocks), axis=0)


@dataclass(frozen=True, eq=False)
class BrownianPanel:
    increments: np.ndarray
    seed: int
    dt: float

    def __post_init__(self):
        arr = np.asarray(self.increments, dtype=float)
        if arr.ndim != 3:
            raise ValidationError(f"panel increments must be (M, N, d), got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "increments", arr)

    @property
    def steps(self) -> int:
        return self.increments.shape[0]

    @property
    def n_particles(self) -> int:
        return self.increments.shape[1]

    @property
    def noise_dim(self) -> int:
        return self.increments.shape[2]

    def window(self, k0: int, k1: int) -> "BrownianPanel":
        """Increments of steps k0 .. k1-1, for restarting the simulation mid-grid."""
        if not 0 <= k0 < k1 <= self.steps:
            raise ValidationError(f"window [{k0}, {k1}) outside 0..{self.steps}")
        return BrownianPanel(self.increments[k0:k1], self.seed, self.dt)


def brownian_panel(seed: int, N: int, M: int, d: int, dt: float, workers: int = 1) -> BrownianPanel:
    """Increment (k, i) is sqrt(dt) times entries k*d .. k*d+d-1 of particle i's stream."""
    if min(N, M, d) < 1:
        raise ValidationError(f"panel dimensions must be >= 1, got N={N}, M={M}, d={d}")
    if not dt > 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    normals = stream_normals(seed, N, M * d, PANEL_STREAM, workers)
    increments = np.sqrt(dt) * normals.reshape(N, M, d).transpose(1, 0, 2)
    return BrownianPanel(np.ascontiguousarray(increments), int(seed), float(dt))


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoefficientSpec:
    drift: DriftFn
    diffusion: DiffusionFn
    state_dim: int
    noise_dim: int
    name: str = "custom"

    def drift_at(self, t: float, X: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.drift(t, X), dtype=float), X.shape)

    def diffusion_at(self, t: float, X: np.ndarray) -> np.ndarray:
        shape = (X.shape[0], self.state_dim, self.noise_dim)
        return np.broadcast_to(np.asarray(self.diffusion(t, X), dtype=float), shape)

    @classmethod
    def zero(cls, state_dim: int = 1, noise_dim: int = 1) -> "CoefficientSpec":
        return cls.constant(np.zeros(state_dim), np.zeros((state_dim, noise_dim)), name="zero")

    @classmethod
    def constant(cls, drift, sigma, name: str = "constant") -> "CoefficientSpec":
        b = as_point(drift)
        s = np.atleast_2d(np.asarray(sigma, dtype=float))
        if s.shape[0] != b.size:
            raise ValidationError(f"diffusion has {s.shape[0]} rows for a {b.size}-dimensional state")
        return cls(lambda t, X: b, lambda t, X: s, b.size, s.shape[1], name)

    @classmethod
    def linear(cls, A, c, sigma) -> "CoefficientSpec":
        """b(t, x) = A x + c with constant diffusion."""
        c = as_point(c)
        A = np.atleast_2d(np.asarray(A, dtype=float))
        s = np.atleast_2d(np.asarray(sigma, dtype=float))
        if A.shape != (c.size, c.size) or s.shape[0] != c.size:
            raise ValidationError(f"linear coefficients need A {c.size}x{c.size} and sigma with {c.size} rows")
        return cls(lambda t, X: X @ A.T + c, lambda t, X: s, c.size, s.shape[1], "linear")


def lipschitz_estimate(
    coeff: CoefficientSpec,
    low,
    high,
    n_samples: int = 256,
    horizon: float = 1.0,
    rng_seed: int = 0,
) -> float:
    """Largest sampled ratio (|b(t,x1)-b(t,x2)| + |sigma(t,x1)-sigma(t,x2)|) / |x1-x2|."""
    low, high = as_point(low), as_point(high)
    rng = np.random.default_rng(rng_seed)
    t = rng.uniform(0.0, horizon, size=n_samples)
    x1 = rng.uniform(low, high, size=(n_samples, low.size))
    x2 = rng.uniform(low, high, size=(n_samples, low.size))
    worst = 0.0
    for s in range(n_samples):
        a, b = x1[s : s + 1], x2[s : s + 1]
        gap = float(np.linalg.norm(a - b))
        if gap == 0.0:
            continue
        num = np.linalg.norm(coeff.drift_at(t[s], a) - coeff.drift_at(t[s], b)) + np.linalg.norm(
            coeff.diffusion_at(t[s], a) - coeff.diffusion_at(t[s], b)
        )
        worst = max(worst, float(num) / gap)
    return worst


# ---------------------------------------------------------------------------
# Initial laws and simulation
# ---------------------------------------------------------------------------


def point_cloud(x, N: int) -> np.ndarray:
    """N copies of the deterministic start x."""
    return np.tile(as_point(x), (N, 1))


def gaussian_cloud(mean, std, N: int, seed: int, workers: int = 1) -> np.ndarray:
    """
    N(mean, diag(std^2)) particles from their own streams, so the first N
    particles are the same for every population size.
    """
    mean = as_point(mean)
    std = np.broadcast_to(as_point(std), mean.shape)
    if np.any(std < 0):
        raise ValidationError("gaussian initial law needs nonnegative std")
    normals = stream_normals(seed, N, mean.size, INITIAL_LAW_STREAM, workers)
    return mean + std * normals


def simulate_forward(
    coeff: CoefficientSpec,
    x0,
    grid: TimeGrid,
    panel: BrownianPanel,
) -> np.ndarray:
    """Euler-Maruyama paths, shape ``(M+1, N, l)``; all particles advance together."""
    X0 = x0.atoms if isinstance(x0, EmpiricalMeasure) else np.asarray(x0, dtype=float)
    if X0.ndim == 1:
        X0 = X0[:, None]
    N = X0.shape[0]
    if X0.shape[1] != coeff.state_dim:
        raise ValidationError(f"initial cloud has dimension {X0.shape[1]}, coefficients expect {coeff.state_dim}")
    if panel.increments.shape != (grid.M, N, coeff.noise_dim):
        raise ValidationError(
            f"panel shape {panel.increments.shape} does not match (M={grid.M}, N={N}, d={coeff.noise_dim})"
        )
    if not np.isclose(panel.dt, grid.dt, rtol=1e-12, atol=0.0):
        raise ValidationError(f"panel dt {panel.dt} differs from grid dt {grid.dt}")

    dt = grid.dt
    times = grid.times
    X = np.empty((grid.M + 1, N, coeff.state_dim))
    X[0] = X0
    for k in range(grid.M):
        drift = coeff.drift_at(times[k], X[k])
        sig = coeff.diffusion_at(times[k], X[k])
        X[k + 1] = X[k] + drift * dt + np.einsum("nld,nd->nl", sig, panel.increments[k])
        if not np.all(np.isfinite(X[k + 1])):
            raise NumericalError(
                f"forward state blew up at step {k + 1} (t={times[k + 1]:.6g}); reduce the step or check coefficients"
            )
    return X


__all__ = [
    "TimeGrid",
    "BrownianPanel",
    "CoefficientSpec",
    "stream_normals",
    "brownian_panel",
    "lipschitz_estimate",
    "point_cloud",
    "gaussian_cloud",
    "simulate_forward",
]
