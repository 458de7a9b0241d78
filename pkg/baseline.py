"""
Subspace interpolation comparator
Neighbor selection, tangent-space interpolation at a reference subspace, and mapping back
"""

import logging
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import BarycentricInterpolator, RBFInterpolator
from scipy.spatial.distance import cdist, pdist, squareform

from error_handler import DimensionMismatchError, InputError, InsufficientNeighborsError
from grassmann import StiefelBasis, TangentVector, grassmann_exp, grassmann_log, horizontal_projection
from kernel import as_point, as_points

logger = logging.getLogger(__name__)


class Scheme(Enum):
    LAGRANGE_1D = "lagrange"
    MULTIQUADRIC_RBF = "rbf"


@dataclass(frozen=True)
class InterpConfig:
    """
    Parameters:
    -----------
    n_r : int
        Number of neighbors, at least 2
    scheme : Scheme
        Lagrange polynomials (d = 1) or entrywise multiquadric RBF
    rbf_shape : float, optional
        Multiquadric shape c; defaults to the mean nearest-neighbor spacing
    """
    n_r: int = 3
    scheme: Scheme = Scheme.LAGRANGE_1D
    rbf_shape: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.n_r < 2:
            raise InsufficientNeighborsError(f"at least two neighbors are needed, got {self.n_r}")
        if self.rbf_shape is not None and self.rbf_shape <= 0:
            raise InputError(f"RBF shape must be positive, got {self.rbf_shape}")

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "InterpConfig":
        return cls(
            n_r=int(payload.get("n_r", 3)),
            scheme=Scheme(payload.get("scheme", "lagrange")),
            rbf_shape=payload.get("rbf_shape")
        )


def normalize_coordinates(points: np.ndarray, *targets: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Scale coordinates so the training points span unit ranges"""
    low = points.min(axis=0)
    spread = np.ptp(points, axis=0).astype(float)
    spread[spread == 0.0] = 1.0
    return tuple((arr - low) / spread for arr in (points,) + targets)


def select_neighbors(theta: Any, points: Any, n_r: int) -> Tuple[int, np.ndarray]:
    """
    Nearest training points to theta in normalized coordinates

    Returns:
    --------
    Tuple[int, np.ndarray]
        Reference index (the nearest point) and the n_r neighbor indices, nearest first;
        ties go to the lowest index
    """
    pts = as_points(points)
    target = as_point(theta)
    if target.size != pts.shape[1]:
        raise DimensionMismatchError(f"target has dimension {target.size}, points have {pts.shape[1]}")
    if not 1 <= n_r <= pts.shape[0]:
        raise InsufficientNeighborsError(f"cannot select {n_r} neighbors from {pts.shape[0]} points")
    scaled, scaled_target = normalize_coordinates(pts, target[None, :])
    dist = cdist(scaled_target, scaled)[0]
    order = np.argsort(dist, kind="stable")[:n_r]
    return int(order[0]), order


def _default_shape(nodes: np.ndarray) -> float:
    gaps = squareform(pdist(nodes))
    np.fill_diagonal(gaps, np.inf)
    spacing = float(np.mean(gaps.min(axis=1)))
    return spacing if spacing > 0 else 1.0


def subspace_interpolate(theta: Any, points: Any, bases: Sequence[StiefelBasis],
                         config: InterpConfig) -> StiefelBasis:
    """
    Interpolate the subspace at theta in the tangent space of the nearest sample

    Parameters:
    -----------
    theta : array-like
        Target parameter
    points : array-like
        l x d sample parameters
    bases : Sequence[StiefelBasis]
        Sample subspaces
    config : InterpConfig
        Neighbor count and interpolation scheme

    Returns:
    --------
    StiefelBasis
        Interpolated subspace
    """
    pts = as_points(points)
    if len(bases) != pts.shape[0]:
        raise DimensionMismatchError(f"{pts.shape[0]} points but {len(bases)} bases")
    if config.n_r > pts.shape[0]:
        raise InsufficientNeighborsError(f"n_r={config.n_r} exceeds the {pts.shape[0]} samples")
    if config.scheme is Scheme.LAGRANGE_1D and pts.shape[1] != 1:
        raise DimensionMismatchError("Lagrange interpolation needs a one-dimensional parameter")

    ref, neighbors = select_neighbors(theta, pts, config.n_r)
    x_ref = bases[ref]
    n, k = x_ref.n, x_ref.k
    # Flattened tangent vectors, one row per neighbor
    values = np.stack([
        np.zeros(n * k) if j == ref else grassmann_log(x_ref, bases[j]).delta.ravel()
        for j in neighbors
    ])

    scaled, target = normalize_coordinates(pts, as_point(theta)[None, :])
    nodes = scaled[neighbors]
    if config.scheme is Scheme.LAGRANGE_1D:
        delta = BarycentricInterpolator(nodes[:, 0], values)(target[0, 0])
        delta = np.asarray(delta).reshape(n, k)
    else:
        shape = config.rbf_shape or _default_shape(nodes)
        with warnings.catch_warnings():
            # pure multiquadric, no polynomial tail
            warnings.simplefilter("ignore", UserWarning)
            rbf = RBFInterpolator(nodes, values, kernel="multiquadric",
                                  epsilon=1.0 / shape, degree=-1)
        delta = rbf(target)[0].reshape(n, k)
    delta = horizontal_projection(x_ref, delta)
    return grassmann_exp(x_ref, TangentVector(x_ref, delta))
