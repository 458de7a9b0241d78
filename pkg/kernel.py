"""
Correlation functions on the parameter space
Squared-exponential kernel, its correlation matrices, and length-scale derivatives
"""

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from error_handler import DimensionMismatchError, InputError, NonFiniteError

DEFAULT_JITTER = 1e-10
MAX_JITTER = 1e-6

ArrayLike = Union[Sequence[float], np.ndarray]


class Family(Enum):
    SQUARED_EXPONENTIAL = "se"


def as_points(points: Any) -> np.ndarray:
    """Parameter points as an (l, d) float array with finite entries"""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionMismatchError(f"points must be an (l, d) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("parameter points must be finite")
    return arr


def as_point(theta: Any) -> np.ndarray:
    """One parameter point as a flat float vector"""
    arr = np.atleast_1d(np.asarray(theta, dtype=float)).ravel()
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("parameter point must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """
    Correlation family with its hyperparameters

    Parameters:
    -----------
    lengthscales : np.ndarray
        Positive length-scales, one per dimension, or a single one when shared
    jitter : float
        Nonnegative value added to the correlation-matrix diagonal
    family : Family
        Correlation family
    shared : bool
        Use one length-scale for every dimension
    """
    lengthscales: np.ndarray
    jitter: float = DEFAULT_JITTER
    family: Family = Family.SQUARED_EXPONENTIAL
    shared: bool = field(default=False)

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).ravel()
        if beta.size == 0 or not np.all(np.isfinite(beta)) or np.any(beta <= 0):
            raise InputError(f"length-scales must be positive and finite, got {beta}")
        if self.shared and beta.size != 1:
            raise InputError("a shared kernel takes exactly one length-scale")
        if not 0.0 <= self.jitter <= MAX_JITTER:
            raise InputError(f"jitter must lie in [0, {MAX_JITTER}], got {self.jitter}")
        beta.setflags(write=False)
        object.__setattr__(self, "lengthscales", beta)
        object.__setattr__(self, "family", Family(self.family))

    @property
    def n_hyper(self) -> int:
        return self.lengthscales.size

    def with_lengthscales(self, beta: ArrayLike) -> "KernelSpec":
        return replace(self, lengthscales=np.asarray(beta, dtype=float))

    def scales_for(self, d: int) -> np.ndarray:
        """Per-dimension length-scales for a d-dimensional parameter space"""
        if self.shared:
            return np.full(d, self.lengthscales[0])
        if self.lengthscales.size != d:
            raise DimensionMismatchError(
                f"kernel has {self.lengthscales.size} length-scales, points have dimension {d}"
            )
        return self.lengthscales

    def to_dict(self) -> Dict[str, Any]:
        payload = {
            "family": self.family.value,
            "lengthscales": [float(b) for b in self.lengthscales],
            "jitter": float(self.jitter)
        }
        if self.shared:
            payload["shared"] = True
        return payload

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "KernelSpec":
        try:
            family = Family(payload.get("family", "se"))
        except ValueError:
            raise InputError(f"unsupported kernel family {payload.get('family')!r}")
        if "lengthscales" not in payload:
            raise InputError("kernel JSON lacks 'lengthscales'")
        return cls(
            lengthscales=np.asarray(payload["lengthscales"], dtype=float),
            jitter=float(payload.get("jitter", DEFAULT_JITTER)),
            family=family,
            shared=bool(payload.get("shared", False))
        )

    @classmethod
    def from_json(cls, text: str) -> "KernelSpec":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise InputError(f"kernel JSON is malformed: {e}")
        return cls.from_dict(payload)


def _pair(spec: KernelSpec, theta: ArrayLike, theta_prime: ArrayLike):
    a, b = as_point(theta), as_point(theta_prime)
    if a.size != b.size:
        raise DimensionMismatchError(f"points differ in dimension: {a.size} vs {b.size}")
    return a, b, spec.scales_for(a.size)


def kernel_eval(spec: KernelSpec, theta: ArrayLike, theta_prime: ArrayLike) -> float:
    """SE correlation prod_i exp(-(theta_i - theta_i')^2 / (2 beta_i^2))"""
    a, b, beta = _pair(spec, theta, theta_prime)
    return float(np.exp(-0.5 * np.sum(((a - b) / beta) ** 2)))


def kernel_grad(spec: KernelSpec, theta: ArrayLike, theta_prime: ArrayLike) -> np.ndarray:
    """
    Derivative of the SE correlation in each length-scale

    Returns:
    --------
    np.ndarray
        (theta_i - theta_i')^2 beta_i^{-3} k per dimension; a single summed entry when shared
    """
    a, b, beta = _pair(spec, theta, theta_prime)
    k = np.exp(-0.5 * np.sum(((a - b) / beta) ** 2))
    grad = (a - b) ** 2 / beta ** 3 * k
    if spec.shared:
        return np.array([grad.sum()])
    return grad


def corr_matrix(spec: KernelSpec, points: Any) -> np.ndarray:
    """Correlation matrix K_l with jitter on the diagonal, symmetric by construction"""
    pts = as_points(points)
    scaled = pts / spec.scales_for(pts.shape[1])
    # squareform mirrors one triangle, so K is bitwise symmetric
    k = squareform(np.exp(-0.5 * pdist(scaled, "sqeuclidean")))
    np.fill_diagonal(k, 1.0 + spec.jitter)
    return k


def cross_corr(spec: KernelSpec, theta: ArrayLike, points: Any) -> np.ndarray:
    """Correlations k(theta, theta_i) against every training point"""
    pts = as_points(points)
    a = as_point(theta)
    if a.size != pts.shape[1]:
        raise DimensionMismatchError(f"target has dimension {a.size}, points have {pts.shape[1]}")
    beta = spec.scales_for(a.size)
    return np.exp(-0.5 * cdist(a[None, :] / beta, pts / beta, "sqeuclidean")[0])


def corr_matrix_grad(spec: KernelSpec, points: Any) -> List[np.ndarray]:
    """dK/dbeta_m for every hyperparameter; the jitter does not depend on beta"""
    pts = as_points(points)
    d = pts.shape[1]
    beta = spec.scales_for(d)
    k = corr_matrix(spec, pts)
    np.fill_diagonal(k, 1.0)
    grads = []
    for m in range(d):
        sq = squareform(pdist(pts[:, m:m + 1], "sqeuclidean"))
        grads.append(sq / beta[m] ** 3 * k)
    if spec.shared:
        return [np.sum(grads, axis=0)]
    return grads
