"""
Grassmann and Stiefel linear algebra
Orthonormal representatives, principal angles, exponential/logarithm maps and MACG sampling
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as spla

from error_handler import (
    BaseMismatchError,
    CutLocusError,
    DimensionMismatchError,
    NonFiniteError,
    NotOrthonormalError,
    NotPSDError,
    RankDeficientError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-10
HORIZONTAL_TOL = 1e-8
RANK_TOL = 1e-12
CUT_LOCUS_MARGIN = 1e-8
PSD_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class StiefelBasis:
    """
    An n x k matrix with orthonormal columns, standing for the subspace it spans

    Parameters:
    -----------
    entries : np.ndarray
        The n x k matrix
    check : bool
        Verify orthonormality on construction
    """
    entries: np.ndarray
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float, copy=True)
        if entries.ndim == 1:
            entries = entries[:, None]
        if entries.ndim != 2:
            raise ShapeMismatchError(f"basis must be a matrix, got shape {entries.shape}")
        n, k = entries.shape
        if not 1 <= k <= n:
            raise ShapeMismatchError(f"basis needs 1 <= k <= n, got n={n}, k={k}")
        if not np.all(np.isfinite(entries)):
            raise NonFiniteError("basis has non-finite entries")
        if self.check:
            defect = np.max(np.abs(entries.T @ entries - np.eye(k)))
            if defect > ORTHONORMAL_TOL:
                raise NotOrthonormalError(
                    f"columns are not orthonormal (max |X^T X - I| = {defect:.3e})"
                )
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def k(self) -> int:
        return self.entries.shape[1]

    def rotated(self, q: np.ndarray) -> "StiefelBasis":
        """Another representative X Q of the same subspace"""
        return StiefelBasis(self.entries @ q)


@dataclass(frozen=True, eq=False)
class TangentVector:
    """Horizontal tangent vector at a Stiefel representative"""
    base: StiefelBasis
    delta: np.ndarray

    def __post_init__(self):
        delta = np.array(self.delta, dtype=float, copy=True)
        if delta.shape != self.base.entries.shape:
            raise ShapeMismatchError(
                f"tangent shape {delta.shape} does not match base {self.base.entries.shape}"
            )
        drift = np.max(np.abs(self.base.entries.T @ delta)) if delta.size else 0.0
        if drift > HORIZONTAL_TOL * max(1.0, np.max(np.abs(delta))):
            raise ShapeMismatchError(f"tangent vector is not horizontal (|X^T D| = {drift:.3e})")
        delta.setflags(write=False)
        object.__setattr__(self, "delta", delta)

    def scaled(self, factor: float) -> "TangentVector":
        return TangentVector(self.base, factor * self.delta)

    def norm(self) -> float:
        return float(np.linalg.norm(self.delta))


def _check_pair(x: StiefelBasis, y: StiefelBasis) -> None:
    if x.n != y.n or x.k != y.k:
        raise DimensionMismatchError(
            f"subspaces differ in shape: ({x.n}, {x.k}) vs ({y.n}, {y.k})"
        )


def project_pi(m: np.ndarray) -> StiefelBasis:
    """
    Orthonormal representative V U^T of span(M) from the thin SVD M = V S U^T

    Parameters:
    -----------
    m : np.ndarray
        Full-rank n x k matrix

    Returns:
    --------
    StiefelBasis
        Orthonormal basis of the same span
    """
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        m = m[:, None]
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("cannot project a matrix with non-finite entries")
    v, s, ut = spla.svd(m, full_matrices=False)
    if s[0] == 0.0 or s[-1] / s[0] < RANK_TOL:
        raise RankDeficientError(
            f"matrix is rank deficient (sigma_k / sigma_1 = {s[-1] / s[0] if s[0] else 0.0:.3e})"
        )
    return StiefelBasis(v @ ut)


def principal_angles(x: StiefelBasis, y: StiefelBasis) -> np.ndarray:
    """Principal angles between span(X) and span(Y), ascending, each in [0, pi/2]"""
    _check_pair(x, y)
    # subspace_angles switches to the sine formula for small angles, which arccos loses
    angles = spla.subspace_angles(x.entries, y.entries)
    return np.clip(np.sort(angles), 0.0, np.pi / 2)


def riemannian_distance(x: StiefelBasis, y: StiefelBasis) -> float:
    """2-norm of the principal angles"""
    return float(np.linalg.norm(principal_angles(x, y)))


def grassmann_log(x: StiefelBasis, y: StiefelBasis) -> TangentVector:
    """
    Riemannian logarithm of span(Y) at the representative X

    Parameters:
    -----------
    x : StiefelBasis
        Base point
    y : StiefelBasis
        Target subspace, not in the cut locus of X

    Returns:
    --------
    TangentVector
        Horizontal lift at X whose exponential spans Y
    """
    _check_pair(x, y)
    angles = principal_angles(x, y)
    if angles[-1] >= np.pi / 2 - CUT_LOCUS_MARGIN:
        raise CutLocusError(
            f"largest principal angle {angles[-1]:.6f} reaches the cut locus",
            context={"angles": angles.tolist()}
        )
    xe, ye = x.entries, y.entries
    xty = xe.T @ ye
    horizontal = ye - xe @ xty
    # L = (I - X X^T) Y (X^T Y)^{-1}
    lifted = spla.solve(xty.T, horizontal.T).T
    u, s, wt = spla.svd(lifted, full_matrices=False)
    delta = (u * np.arctan(s)) @ wt
    # Drop the roundoff component along X
    delta = delta - xe @ (xe.T @ delta)
    return TangentVector(x, delta)


def grassmann_exp(x: StiefelBasis, delta: TangentVector) -> StiefelBasis:
    """Riemannian exponential exp_X(delta), re-orthonormalized through project_pi"""
    base = delta.base
    if base.entries.shape != x.entries.shape or not np.allclose(base.entries, x.entries,
                                                                atol=1e-12, rtol=0.0):
        raise BaseMismatchError("tangent vector is not based at the given point")
    if not np.any(delta.delta):
        return x
    u, s, wt = spla.svd(delta.delta, full_matrices=False)
    w = wt.T
    moved = (x.entries @ w) @ (np.cos(s)[:, None] * wt) + (u * np.sin(s)) @ wt
    return project_pi(moved)


def horizontal_projection(x: StiefelBasis, m: np.ndarray) -> np.ndarray:
    """(I - X X^T) M"""
    return m - x.entries @ (x.entries.T @ m)


def sample_uniform(n: int, k: int, rng: np.random.Generator) -> StiefelBasis:
    """Uniform draw on the Grassmann manifold, MACG(I_n)"""
    if not 1 <= k <= n:
        raise ShapeMismatchError(f"need 1 <= k <= n, got n={n}, k={k}")
    return project_pi(rng.standard_normal((n, k)))


def sample_macg(sqrt_sigma: np.ndarray, k: int, rng: np.random.Generator,
                check: Optional[bool] = True) -> StiefelBasis:
    """
    Draw from MACG(Sigma) as pi(Sigma^{1/2} Z)

    Parameters:
    -----------
    sqrt_sigma : np.ndarray
        Symmetric PSD square-root factor of Sigma, n x n
    k : int
        Subspace dimension
    rng : np.random.Generator
        Random source
    check : bool, optional
        Verify symmetry and positive semidefiniteness

    Returns:
    --------
    StiefelBasis
        One sample
    """
    sqrt_sigma = np.asarray(sqrt_sigma, dtype=float)
    if sqrt_sigma.ndim != 2 or sqrt_sigma.shape[0] != sqrt_sigma.shape[1]:
        raise ShapeMismatchError(f"square factor expected, got {sqrt_sigma.shape}")
    if check:
        scale = max(1.0, np.max(np.abs(sqrt_sigma)))
        if np.max(np.abs(sqrt_sigma - sqrt_sigma.T)) > 1e-10 * scale:
            raise NotPSDError("covariance factor is not symmetric")
        lowest = spla.eigvalsh(sqrt_sigma)[0]
        if lowest < -PSD_TOL:
            raise NotPSDError(f"covariance factor has eigenvalue {lowest:.3e}")
    n = sqrt_sigma.shape[0]
    return project_pi(sqrt_sigma @ rng.standard_normal((n, k)))
