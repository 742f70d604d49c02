"""
Uniform empirical measures on R^n and the Wasserstein-2 distances used by the
solver and the diagnostics.

Atoms are stored as a read-only ``(N, n)`` float array. Weights are always 1/N.
"""

from dataclasses import dataclass
from typing import Callable, Iterator, Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import NumericalError, ValidationError

EXACT_W2_MAX_ATOMS = 64

PointLike = Union[float, Sequence[float], np.ndarray]


def as_point(coords: PointLike) -> np.ndarray:
    """Return a finite 1-d float array for a scalar or a coordinate sequence."""
    p = np.atleast_1d(np.asarray(coords, dtype=float))
    if p.ndim != 1:
        raise ValidationError(f"a point must be one-dimensional, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValidationError(f"point has non-finite coordinates: {p.tolist()}")
    return p


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    atoms: np.ndarray

    def __post_init__(self):
        arr = np.array(self.atoms, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"atoms must form a nonempty (N, n) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("empirical measure has non-finite atoms")
        arr.setflags(write=False)
        object.__setattr__(self, "atoms", arr)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "EmpiricalMeasure":
        return cls(arr)

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def __len__(self) -> int:
        return self.size

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.atoms)

    def translate(self, shift: PointLike) -> "EmpiricalMeasure":
        """Shift every atom by the same vector; W2 to the original is |shift|."""
        return EmpiricalMeasure(self.atoms + as_point(shift)[None, :])


def empirical_from(points: Union[Sequence[PointLike], np.ndarray]) -> EmpiricalMeasure:
    if isinstance(points, np.ndarray) and points.ndim == 2:
        return EmpiricalMeasure(points)
    pts = [np.atleast_1d(np.asarray(p, dtype=float)) for p in points]
    if not pts:
        raise ValidationError("cannot build an empirical measure from no points")
    dims = {p.shape for p in pts}
    if len(dims) != 1:
        raise ValidationError(f"points have mixed dimensions: {sorted(d[0] for d in dims)}")
    return EmpiricalMeasure(np.vstack(pts))


def mean(mu: EmpiricalMeasure) -> np.ndarray:
    return mu.atoms.mean(axis=0)


def w2_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """W2 between one-dimensional clouds of equal size, via the sorted coupling."""
    if mu.dim != 1 or nu.dim != 1:
        raise ValidationError(f"w2_1d needs one-dimensional measures, got dims {mu.dim} and {nu.dim}")
    if mu.size != nu.size:
        raise ValidationError(f"w2_1d needs equal atom counts, got {mu.size} and {nu.size}")
    x = np.sort(mu.atoms[:, 0])
    y = np.sort(nu.atoms[:, 0])
    return float(np.sqrt(np.mean((x - y) ** 2)))


def w2_exact_small(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact W2 in any dimension through an optimal assignment (N <= 64)."""
    if mu.size != nu.size:
        raise ValidationError(f"w2_exact_small needs equal atom counts, got {mu.size} and {nu.size}")
    if mu.size > EXACT_W2_MAX_ATOMS:
        raise ValidationError(
            f"exact W2 is capped at {EXACT_W2_MAX_ATOMS} atoms, got {mu.size}; "
            "larger multi-dimensional distances are not approximated"
        )
    if mu.dim != nu.dim:
        raise ValidationError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    cost = cdist(mu.atoms, nu.atoms, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def pushforward(
    mu: EmpiricalMeasure,
    fn: Callable[[np.ndarray], PointLike],
    vectorized: bool = False,
) -> EmpiricalMeasure:
    """Image of `mu` under `fn`. With `vectorized`, `fn` maps the whole (N, n) atom array."""
    if vectorized:
        images = np.asarray(fn(mu.atoms), dtype=float)
        if images.ndim == 1:
            images = images[:, None]
    else:
        images = np.vstack([np.atleast_1d(np.asarray(fn(a), dtype=float)) for a in mu.atoms])
    if images.shape[0] != mu.size:
        raise ValidationError(f"map returned {images.shape[0]} images for {mu.size} atoms")
    if not np.all(np.isfinite(images)):
        raise NumericalError("pushforward map returned a non-finite value")
    return EmpiricalMeasure(images)


def quantile_subsample(mu: EmpiricalMeasure, size: int) -> EmpiricalMeasure:
    """Size-`size` one-dimensional cloud at the mid-quantiles of `mu`."""
    if mu.dim != 1:
        raise ValidationError("quantile subsampling is defined for one-dimensional measures only")
    if not 1 <= size <= mu.size:
        raise ValidationError(f"subsample size must lie in [1, {mu.size}], got {size}")
    ordered = np.sort(mu.atoms[:, 0])
    idx = np.floor((np.arange(size) + 0.5) * mu.size / size).astype(int)
    return EmpiricalMeasure(ordered[np.minimum(idx, mu.size - 1)][:, None])


__all__ = [
    "EXACT_W2_MAX_ATOMS",
    "EmpiricalMeasure",
    "as_point",
    "empirical_from",
    "mean",
    "w2_1d",
    "w2_exact_small",
    "pushforward",
    "quantile_subsample",
]
