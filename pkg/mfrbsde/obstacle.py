"""
The constraint functional H(y, mu): value, y-gradient, Lions derivative, the
declared constants (beta, M, L, delta0), the built-in affine and separable
families, the sampling-based assumption checker and the particle reflection
drift.

All callables are vectorized over a cloud: ``y`` is ``(N, n)``, ``value``
returns ``(N,)``, ``grad_y`` returns ``(N, n)`` and ``lions_grad(y, mu, v)``
evaluates the derivative pairwise on rows of ``y`` and ``v``.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import NumericalError, ValidationError
from .measure import EXACT_W2_MAX_ATOMS, EmpiricalMeasure, as_point, w2_exact_small

logger = logging.getLogger(__name__)

CloudFn = Callable[[np.ndarray, EmpiricalMeasure], np.ndarray]
LionsFn = Callable[[np.ndarray, EmpiricalMeasure, np.ndarray], np.ndarray]

FD_STEP = 1e-5
EXACT_TOL = 1e-8
FD_TOL = 1e-4


def _as_cloud(y) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(y, dtype=float)
    if arr.ndim <= 1:
        return np.atleast_1d(arr)[None, :], True
    return arr, False


@dataclass(frozen=True, eq=False)
class ObstacleFunctional:
    value: CloudFn
    grad_y: CloudFn
    lions_grad: LionsFn
    beta: float
    bound_M: float
    lip_L: Optional[float] = 0.0
    delta0: Optional[float] = None
    hess_yy: Optional[CloudFn] = None
    grad_v_lions: Optional[LionsFn] = None
    # True when lions_grad(y, mu, v) does not depend on y, which turns the
    # interaction sum of the reflection drift into a single product
    lions_y_free: bool = False
    exact: bool = False
    name: str = "custom"

    def __post_init__(self):
        if not self.beta > 0:
            raise ValidationError(
                f"obstacle '{self.name}' violates the lower gradient bound: beta must be > 0, got {self.beta}"
            )
        if not self.beta < self.bound_M:
            raise ValidationError(
                f"obstacle '{self.name}': the lower gradient bound beta={self.beta} "
                f"must stay below the derivative bound M={self.bound_M}"
            )
        if self.lip_L is not None and self.lip_L < 0:
            raise ValidationError(f"Lipschitz constant must be nonnegative, got {self.lip_L}")
        if self.delta0 is not None and not 0 < self.delta0 <= 1:
            raise ValidationError(f"strictness margin delta0 must lie in (0, 1], got {self.delta0}")

    @property
    def default_tol(self) -> float:
        return EXACT_TOL if self.exact else FD_TOL

    def evaluate(self, y: np.ndarray, mu: EmpiricalMeasure) -> np.ndarray:
        return np.asarray(self.value(y, mu), dtype=float).reshape(y.shape[0])

    def gradient(self, y: np.ndarray, mu: EmpiricalMeasure) -> np.ndarray:
        return np.asarray(self.grad_y(y, mu), dtype=float).reshape(y.shape)

    def lions(self, y: np.ndarray, mu: EmpiricalMeasure, v: np.ndarray) -> np.ndarray:
        return np.asarray(self.lions_grad(y, mu, v), dtype=float).reshape(v.shape)

    def hessian(self, y: np.ndarray, mu: EmpiricalMeasure, eps: float = FD_STEP) -> np.ndarray:
        if self.hess_yy is not None:
            return np.asarray(self.hess_yy(y, mu), dtype=float).reshape(y.shape + (y.shape[1],))
        out = np.empty(y.shape + (y.shape[1],))
        for r in range(y.shape[1]):
            step = np.zeros(y.shape[1])
            step[r] = eps
            out[:, :, r] = (self.gradient(y + step, mu) - self.gradient(y - step, mu)) / (2 * eps)
        return out

    def lions_jacobian(self, y: np.ndarray, mu: EmpiricalMeasure, v: np.ndarray, eps: float = FD_STEP) -> np.ndarray:
        if self.grad_v_lions is not None:
            return np.asarray(self.grad_v_lions(y, mu, v), dtype=float).reshape(v.shape + (v.shape[1],))
        out = np.empty(v.shape + (v.shape[1],))
        for r in range(v.shape[1]):
            step = np.zeros(v.shape[1])
            step[r] = eps
            out[:, :, r] = (self.lions(y, mu, v + step) - self.lions(y, mu, v - step)) / (2 * eps)
        return out


def h_minus(H: ObstacleFunctional, y, mu: EmpiricalMeasure):
    """Negative part max(0, -H(y, mu)); a float for one point, an array for a cloud."""
    cloud, single = _as_cloud(y)
    neg = np.maximum(0.0, -H.evaluate(cloud, mu))
    return float(neg[0]) if single else neg


def reflection_increment(H: ObstacleFunctional, cloud_y, mu: EmpiricalMeasure, k) -> np.ndarray:
    """
    Reflection drift density of every particle:
    grad_y H(y_i, mu) k_i + (1/N) sum_j lions_grad(y_j, mu, y_i) k_j.
    The caller multiplies by the time step.
    """
    y, _ = _as_cloud(cloud_y)
    k = np.asarray(k, dtype=float).ravel()
    if k.size != y.shape[0]:
        raise ValidationError(f"got {k.size} penalty densities for {y.shape[0]} particles")
    if mu.size != y.shape[0]:
        raise ValidationError(f"measure has {mu.size} atoms but the cloud has {y.shape[0]} particles")
    if np.any(k < 0):
        raise ValidationError("penalty densities must be nonnegative")

    own = H.gradient(y, mu) * k[:, None]
    if not np.any(k):
        return own
    if H.lions_y_free:
        cross = H.lions(y, mu, y) * k.mean()
    else:
        cross = np.zeros_like(y)
        for j in np.flatnonzero(k):
            cross += H.lions(np.broadcast_to(y[j], y.shape), mu, y) * k[j]
        cross /= y.shape[0]
    return own + cross


def make_affine(alpha, a: float, alpha_prime, b: float) -> ObstacleFunctional:
    """H(y, mu) = alpha.y + a E_mu[alpha'.v] + b with exact derivatives."""
    alpha = as_point(alpha)
    alpha_prime = as_point(alpha_prime)
    if alpha.size != alpha_prime.size:
        raise ValidationError(f"alpha has {alpha.size} entries but alpha_prime has {alpha_prime.size}")
    if a < 0:
        raise ValidationError(f"law weight a must be nonnegative, got {a}")
    norm = float(np.linalg.norm(alpha))
    if norm == 0.0:
        raise ValidationError(
            "affine obstacle violates the lower gradient bound |d_y H| >= beta > 0: alpha is zero"
        )
    law_dir = a * alpha_prime
    n = alpha.size

    def value(y, mu):
        return y @ alpha + a * float(np.mean(mu.atoms @ alpha_prime)) + b

    def grad_y(y, mu):
        return np.broadcast_to(alpha, y.shape).copy()

    def lions_grad(y, mu, v):
        return np.broadcast_to(law_dir, v.shape).copy()

    def hess_yy(y, mu):
        return np.zeros((y.shape[0], n, n))

    def grad_v_lions(y, mu, v):
        return np.zeros((v.shape[0], n, n))

    ratio = float(np.linalg.norm(law_dir)) / norm
    return ObstacleFunctional(
        value=value,
        grad_y=grad_y,
        lions_grad=lions_grad,
        hess_yy=hess_yy,
        grad_v_lions=grad_v_lions,
        beta=norm,
        bound_M=(norm + float(np.linalg.norm(law_dir))) * (1.0 + 1e-9),
        lip_L=0.0,
        delta0=1.0 - ratio if ratio < 1.0 else None,
        lions_y_free=True,
        exact=True,
        name="affine",
    )


def make_separable(
    G: Callable[[np.ndarray], np.ndarray],
    grad_G: Callable[[np.ndarray], np.ndarray],
    h: Callable[[float], float],
    dh: Callable[[float], float],
    phi: Callable[[np.ndarray], np.ndarray],
    grad_phi: Callable[[np.ndarray], np.ndarray],
    beta: float,
    bound_M: float,
    lip_L: Optional[float] = None,
    delta0: Optional[float] = None,
    hess_G: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    hess_phi: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    name: str = "separable",
) -> ObstacleFunctional:
    """
    H(y, mu) = G(y) + h(E_mu[phi(v)]), with the chain-rule Lions derivative
    h'(E_mu[phi]) grad phi(v). Missing second derivatives fall back to finite
    differences.
    """

    def law_stat(mu):
        return float(np.mean(phi(mu.atoms)))

    def value(y, mu):
        return G(y) + h(law_stat(mu))

    def grad_y(y, mu):
        return grad_G(y)

    def lions_grad(y, mu, v):
        return dh(law_stat(mu)) * grad_phi(v)

    grad_v_lions = None
    if hess_phi is not None:

        def grad_v_lions(y, mu, v):
            return dh(law_stat(mu)) * hess_phi(v)

    return ObstacleFunctional(
        value=value,
        grad_y=grad_y,
        lions_grad=lions_grad,
        hess_yy=(lambda y, mu: hess_G(y)) if hess_G is not None else None,
        grad_v_lions=grad_v_lions,
        beta=beta,
        bound_M=bound_M,
        lip_L=lip_L,
        delta0=delta0,
        lions_y_free=True,
        exact=hess_G is not None and hess_phi is not None,
        name=name,
    )


def lions_grad_fd(H: ObstacleFunctional, y, mu: EmpiricalMeasure, atom_index: int, eps: float = 1e-6) -> np.ndarray:
    """Atom-perturbation estimate N (H(y, mu with atom i moved by eps e_r) - H(y, mu)) / eps."""
    if eps <= 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    if not 0 <= atom_index < mu.size:
        raise ValidationError(f"atom index {atom_index} out of range for {mu.size} atoms")
    point = as_point(y)[None, :]
    base = H.evaluate(point, mu)[0]
    out = np.empty(mu.dim)
    for r in range(mu.dim):
        atoms = mu.atoms.copy()
        atoms[atom_index, r] += eps
        out[r] = mu.size * (H.evaluate(point, EmpiricalMeasure(atoms))[0] - base) / eps
    if not np.all(np.isfinite(out)):
        raise NumericalError("finite-difference Lions derivative is not finite")
    return out


# ---------------------------------------------------------------------------
# Assumption checker
# ---------------------------------------------------------------------------

CONDITIONS = ("bound_12", "bound_13", "lipschitz_14", "sign_15", "concavity_16", "strict_38")


@dataclass(frozen=True)
class SampleDomain:
    low: np.ndarray
    high: np.ndarray
    min_atoms: int = 1
    max_atoms: int = 8

    def __post_init__(self):
        low = as_point(self.low)
        high = as_point(self.high)
        if low.shape != high.shape or np.any(low >= high):
            raise ValidationError("sample box needs low < high in every coordinate")
        if not 1 <= self.min_atoms <= self.max_atoms <= EXACT_W2_MAX_ATOMS:
            raise ValidationError(
                f"atom-count range must satisfy 1 <= min <= max <= {EXACT_W2_MAX_ATOMS}"
            )
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @classmethod
    def box(cls, dim: int, half_width: float = 3.0, center=None, **kwargs) -> "SampleDomain":
        c = np.zeros(dim) if center is None else as_point(center)
        return cls(c - half_width, c + half_width, **kwargs)


@dataclass
class ConditionResult:
    condition: str
    status: str
    margin: float
    witness: Optional[Dict[str, Any]] = None
    detail: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "condition": self.condition,
            "status": self.status,
            "margin": self.margin,
            "witness": self.witness,
            "detail": self.detail,
        }


@dataclass
class AssumptionReport:
    results: Dict[str, ConditionResult]
    n_samples: int
    tol: float
    notes: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.status != "fail" for r in self.results.values())

    def failed(self) -> List[str]:
        return [c for c, r in self.results.items() if r.status == "fail"]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "n_samples": self.n_samples,
            "tol": self.tol,
            "conditions": [self.results[c].to_dict() for c in CONDITIONS],
            "notes": list(self.notes),
        }


def check_assumptions(
    H: ObstacleFunctional,
    sample_domain: SampleDomain,
    n_samples: int = 256,
    tol: Optional[float] = None,
    rng_seed: int = 0,
) -> AssumptionReport:
    """
    Monte Carlo falsifier for the structural conditions on H. A pass only
    means no sampled point violated a condition beyond `tol`.
    """
    if n_samples < 1:
        raise ValidationError(f"n_samples must be >= 1, got {n_samples}")
    tol = H.default_tol if tol is None else tol
    rng = np.random.default_rng(rng_seed)
    low, high = sample_domain.low, sample_domain.high
    n = low.size

    worst: Dict[str, Tuple[float, Optional[Dict[str, Any]]]] = {c: (np.inf, None) for c in CONDITIONS}
    worst_ratio = 0.0
    largest_lions = 0.0

    def record(cond, margin, witness):
        if margin < worst[cond][0]:
            worst[cond] = (float(margin), witness)

    for _ in range(n_samples):
        N = int(rng.integers(sample_domain.min_atoms, sample_domain.max_atoms + 1))
        y1, y2, v = rng.uniform(low, high, size=(3, n))
        a1 = rng.uniform(low, high, size=(N, n))
        a2 = rng.uniform(low, high, size=(N, n))
        mu1, mu2 = EmpiricalMeasure(a1), EmpiricalMeasure(a2)
        Y1, Y2, V = y1[None, :], y2[None, :], v[None, :]
        Y1s = np.repeat(Y1, N, axis=0)

        gy = H.gradient(Y1, mu1)[0]
        lv = H.lions(Y1, mu1, V)[0]
        lv2 = H.lions(Y2, mu2, V)[0]
        l1 = H.lions(Y1s, mu1, a1)
        l2 = H.lions(Y1s, mu2, a2)
        gy_norm = float(np.linalg.norm(gy))
        largest_lions = max(largest_lions, float(np.abs(lv).max()), float(np.abs(l1).max()))

        witness = {"y": y1.tolist(), "mu": a1.tolist(), "v": v.tolist()}
        pair_witness = dict(witness, y2=y2.tolist(), mu2=a2.tolist())

        record("bound_12", gy_norm - H.beta, witness)

        total = (
            gy_norm
            + np.linalg.norm(H.hessian(Y1, mu1)[0])
            + np.linalg.norm(lv)
            + np.linalg.norm(H.lions_jacobian(Y1, mu1, V)[0])
        )
        record("bound_13", H.bound_M - total, witness)

        if H.lip_L is not None:
            shift = float(np.linalg.norm(gy - H.gradient(Y1, mu2)[0]))
            lhs = float(np.mean(np.sum((l1 - l2) ** 2, axis=1)))
            rhs = H.lip_L * float(np.mean(np.sum((a1 - a2) ** 2, axis=1)))
            record("lipschitz_14", min(H.lip_L * w2_exact_small(mu1, mu2) - shift, rhs - lhs), pair_witness)

        record("sign_15", min(float(gy @ lv2), float(lv @ lv2)), pair_witness)

        lhs16 = H.evaluate(Y2, mu2)[0] - H.evaluate(Y1, mu1)[0]
        rhs16 = float(gy @ (y2 - y1)) + float(np.mean(np.sum(l1 * (a2 - a1), axis=1)))
        record("concavity_16", rhs16 - lhs16, pair_witness)

        law_mean = float(np.linalg.norm(l1.mean(axis=0)))
        if gy_norm > 0:
            worst_ratio = max(worst_ratio, law_mean / gy_norm)
        if H.delta0 is not None:
            record("strict_38", (1.0 - H.delta0) * gy_norm - law_mean, witness)
        else:
            record("strict_38", gy_norm - law_mean, witness)

    results: Dict[str, ConditionResult] = {}
    for cond in CONDITIONS:
        margin, witness = worst[cond]
        if witness is None:
            results[cond] = ConditionResult(cond, "skipped", float("nan"), None, "no Lipschitz constant declared")
            continue
        if cond == "strict_38" and H.delta0 is None:
            failed = margin <= tol
            detail = f"no delta0 declared; worst ratio |E d_mu H| / |d_y H| = {worst_ratio:.6g}"
        else:
            failed = margin < -tol
            detail = f"worst ratio |E d_mu H| / |d_y H| = {worst_ratio:.6g}" if cond == "strict_38" else ""
        results[cond] = ConditionResult(cond, "fail" if failed else "pass", margin, witness, detail)

    notes = []
    if largest_lions == 0.0:
        notes.append("the Lions derivative vanishes on every sample: H does not depend on the law")
    report = AssumptionReport(results=results, n_samples=n_samples, tol=tol, notes=notes)
    if not report.passed:
        logger.debug("assumption check on '%s' failed: %s", H.name, report.failed())
    return report


__all__ = [
    "CONDITIONS",
    "ObstacleFunctional",
    "SampleDomain",
    "ConditionResult",
    "AssumptionReport",
    "h_minus",
    "reflection_increment",
    "make_affine",
    "make_separable",
    "lions_grad_fd",
    "check_assumptions",
]
