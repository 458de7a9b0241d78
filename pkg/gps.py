"""
Gaussian process subspace regression
Preprocessing of the training subspaces, the factored MACG predictive distribution,
its dense counterpart, predictive and joint path sampling, and the reduced-operator shortcut
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as spla
from scipy.spatial.distance import pdist

from config import resolve_num_threads
from error_handler import (
    DegenerateWeightsError,
    DimensionMismatchError,
    EmptySampleError,
    NumericalError,
    ShapeMismatchError,
    SingularCorrelationError,
    TruncationOutOfRangeError,
)
from grassmann import StiefelBasis, project_pi, riemannian_distance, sample_uniform
from kernel import KernelSpec, as_point, as_points, corr_matrix, cross_corr

logger = logging.getLogger(__name__)

RANK_ETA = 1e-10
WEIGHT_TOL = 1e-12
CHOLESKY_SHIFT = 1e-12
PRIOR_TOL = 1e-6
EXACT_MATCH_TOL = 1e-12
DENSE_LIMIT = 2000


def factor_corr(kernel: KernelSpec, points: np.ndarray) -> Tuple[np.ndarray, Tuple[np.ndarray, bool]]:
    """Correlation matrix and its Cholesky factor; SingularCorrelationError if K is not PD"""
    k = corr_matrix(kernel, points)
    try:
        factor = spla.cho_factor(k, lower=True)
    except np.linalg.LinAlgError:
        raise SingularCorrelationError(
            "correlation matrix is not positive definite; increase the jitter",
            context={"lengthscales": kernel.lengthscales.tolist(), "jitter": kernel.jitter}
        )
    return k, factor


def cholesky_with_fallback(matrix: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, retried once with a small diagonal shift"""
    try:
        return spla.cholesky(matrix, lower=True)
    except np.linalg.LinAlgError:
        shift = CHOLESKY_SHIFT * np.trace(matrix) / matrix.shape[0]
        logger.warning(f"Cholesky failed; retrying with diagonal shift {shift:.3e}")
        try:
            return spla.cholesky(matrix + shift * np.eye(matrix.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            raise NumericalError("weight matrix is not numerically positive definite")


@dataclass(frozen=True, eq=False)
class GpsModel:
    """
    Training data and the kernel-independent preprocessing of a GPS model

    The stacked bases X = [X_1 ... X_l] factor as X[:, pivot] = global_basis @ triangular
    up to the rank threshold eta.
    """
    points: np.ndarray
    bases: Tuple[StiefelBasis, ...]
    kernel: KernelSpec
    gram: np.ndarray
    global_basis: np.ndarray
    triangular: np.ndarray
    pivot: np.ndarray
    rank: int
    eta: float = RANK_ETA
    coincident: bool = False
    corr: np.ndarray = field(default=None, repr=False)
    corr_factor: Tuple[np.ndarray, bool] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.bases[0].n

    @property
    def k(self) -> int:
        return self.bases[0].k

    @property
    def l(self) -> int:
        return len(self.bases)

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def stacked(self) -> np.ndarray:
        return np.hstack([b.entries for b in self.bases])

    @property
    def coefficients(self) -> np.ndarray:
        """C = R P^T = V^T X, the r x kl coordinates of the stacked bases"""
        c = np.zeros((self.rank, self.k * self.l))
        c[:, self.pivot] = self.triangular
        return c

    def block(self, i: int) -> slice:
        return slice(i * self.k, (i + 1) * self.k)

    def with_kernel(self, kernel: KernelSpec) -> "GpsModel":
        """Same preprocessing under another kernel"""
        k, factor = factor_corr(kernel, self.points)
        return replace(self, kernel=kernel, corr=k, corr_factor=factor)

    def subset(self, indices: Sequence[int]) -> "GpsModel":
        """Refit on the selected samples"""
        idx = np.asarray(indices)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return fit(self.points[idx], [self.bases[i] for i in idx], self.kernel, eta=self.eta)


def fit(points: Any, bases: Sequence[StiefelBasis], kernel: KernelSpec,
        eta: float = RANK_ETA) -> GpsModel:
    """
    Preprocess training subspaces: Gram matrix and rank-revealing QR of the stacked bases

    Parameters:
    -----------
    points : array-like
        l x d training parameters
    bases : Sequence[StiefelBasis]
        l orthonormal n x k bases
    kernel : KernelSpec
        Correlation function
    eta : float
        Relative threshold on |R_ii| / |R_11| defining the numerical rank

    Returns:
    --------
    GpsModel
        Fitted model
    """
    bases = tuple(bases)
    if len(bases) == 0:
        raise EmptySampleError("at least one training subspace is required")
    pts = as_points(points)
    if pts.shape[0] != len(bases):
        raise ShapeMismatchError(f"{pts.shape[0]} points but {len(bases)} bases")
    n, k = bases[0].n, bases[0].k
    for i, b in enumerate(bases):
        if (b.n, b.k) != (n, k):
            raise ShapeMismatchError(
                f"basis {i} has shape ({b.n}, {b.k}), expected ({n}, {k})"
            )
    kernel.scales_for(pts.shape[1])

    # n x kl stack of all bases
    x = np.hstack([b.entries for b in bases])
    gram = x.T @ x
    gram = 0.5 * (gram + gram.T)

    # X P = Q R; columns of Q past the rank span nothing new
    q, r, piv = spla.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.count_nonzero(diag >= eta * diag[0]))

    coincident = False
    if pts.shape[0] > 1:
        coincident = bool(np.any(pdist(pts) == 0.0))
        if coincident:
            logger.warning("training set contains coincident parameter points")

    corr, factor = factor_corr(kernel, pts)
    logger.info(f"Fitted GPS model: n={n}, k={k}, l={len(bases)}, r={rank}")
    return GpsModel(
        points=pts, bases=bases, kernel=kernel, gram=gram,
        global_basis=q[:, :rank], triangular=r[:rank, :], pivot=piv, rank=rank,
        eta=eta, coincident=coincident, corr=corr, corr_factor=factor
    )


@dataclass(frozen=True, eq=False)
class PredictiveSubspace:
    """
    Factored MACG(Sigma) predictive distribution,
    Sigma = noise_variance I + (V W) diag(variances) (V W)^T with V the global basis
    and W the local directions
    """
    global_basis: np.ndarray
    directions: np.ndarray
    variances: np.ndarray
    noise_variance: float
    k: int
    prior_dominated: bool = False
    anchor: Optional[StiefelBasis] = None

    @property
    def truncation(self) -> int:
        return self.directions.shape[1]

    @property
    def n(self) -> int:
        return self.global_basis.shape[0]

    @property
    def rank(self) -> int:
        return self.global_basis.shape[1]

    def mean_coordinates(self) -> np.ndarray:
        return self.directions[:, :self.k]

    def mean_basis(self) -> StiefelBasis:
        """Mean subspace; the training subspace itself at a training point"""
        if self.anchor is not None:
            return self.anchor
        return StiefelBasis(self.global_basis @ self.mean_coordinates())

    def principal_directions(self) -> np.ndarray:
        return self.global_basis @ self.directions

    def covariance(self) -> np.ndarray:
        """Dense Sigma; only for small n"""
        w = self.principal_directions()
        sigma = self.noise_variance * np.eye(self.n) + (w * self.variances) @ w.T
        return 0.5 * (sigma + sigma.T)


def _check_target(model: GpsModel, theta: Any) -> np.ndarray:
    theta = as_point(theta)
    if theta.size != model.d:
        raise DimensionMismatchError(f"target has dimension {theta.size}, model has {model.d}")
    return theta


def _match_training_point(model: GpsModel, theta: np.ndarray) -> Optional[int]:
    beta = model.kernel.scales_for(model.d)
    dist = np.linalg.norm((model.points - theta) / beta, axis=1)
    i = int(np.argmin(dist))
    return i if dist[i] < EXACT_MATCH_TOL else None


def kernel_weights(model: GpsModel, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Cross correlations k and weights v = K^{-1} k"""
    kvec = cross_corr(model.kernel, theta, model.points)
    return kvec, spla.cho_solve(model.corr_factor, kvec)


def pi_matrix(model: GpsModel, v: np.ndarray) -> np.ndarray:
    """
    Weight matrix Pi = gram o (K~ kron J_k) with K~ = (D_v K D_v)^{-1}

    Parameters:
    -----------
    model : GpsModel
        Fitted model
    v : np.ndarray
        Kernel weights, all nonzero

    Returns:
    --------
    np.ndarray
        kl x kl symmetric positive definite matrix
    """
    # K^ = K^{-1} diag(v)^{-1}, then Pi_ij = v_i^{-1} K^_ij gram_ij
    k_hat = spla.cho_solve(model.corr_factor, np.diag(1.0 / v))
    k_tilde = k_hat / v[:, None]
    k_tilde = 0.5 * (k_tilde + k_tilde.T)
    return model.gram * np.kron(k_tilde, np.ones((model.k, model.k)))


def factored_spectrum(pi: np.ndarray, triangular: np.ndarray,
                      pivot: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of S = R (P^T Pi P)^{-1} R^T, descending, via Cholesky and a triangular solve"""
    chol = cholesky_with_fallback(pi[np.ix_(pivot, pivot)])
    lt = spla.solve_triangular(chol, triangular.T, lower=True)
    s = lt.T @ lt
    w, q = spla.eigh(0.5 * (s + s.T))
    return np.clip(w[::-1], 0.0, None), q[:, ::-1]


def _training_prediction(model: GpsModel, i: int, t: int) -> PredictiveSubspace:
    c_i = model.coefficients[:, model.block(i)]
    u = spla.svd(c_i, full_matrices=False)[0]
    directions = u
    if t > model.k:
        directions = np.hstack([u, spla.null_space(u.T)[:, :t - model.k]])
    variances = np.concatenate([np.ones(model.k), np.zeros(t - model.k)])
    return PredictiveSubspace(
        global_basis=model.global_basis, directions=directions, variances=variances,
        noise_variance=0.0, k=model.k, prior_dominated=False, anchor=model.bases[i]
    )


def _prior_prediction(model: GpsModel, t: int) -> PredictiveSubspace:
    logger.warning("all kernel weights vanish; prediction falls back to the prior")
    return PredictiveSubspace(
        global_basis=model.global_basis, directions=np.eye(model.rank)[:, :t],
        variances=np.zeros(t), noise_variance=1.0, k=model.k, prior_dominated=True
    )


def _degenerate(v: np.ndarray) -> np.ndarray:
    return np.abs(v) < WEIGHT_TOL * np.max(np.abs(v))


def predict(model: GpsModel, theta: Any, t: Optional[int] = None,
            allow_exclusion: bool = True) -> PredictiveSubspace:
    """
    Factored predictive distribution of the subspace at theta

    Parameters:
    -----------
    model : GpsModel
        Fitted model
    theta : array-like
        Target parameter
    t : int, optional
        Truncation of the eigendecomposition, k <= t <= r; defaults to k
    allow_exclusion : bool
        Refit once without samples whose weights vanish

    Returns:
    --------
    PredictiveSubspace
        Principal directions, principal variances and noise variance
    """
    theta = _check_target(model, theta)
    t = model.k if t is None else int(t)
    if not model.k <= t <= model.rank:
        raise TruncationOutOfRangeError(f"truncation t={t} outside [{model.k}, {model.rank}]")

    match = _match_training_point(model, theta)
    if match is not None:
        return _training_prediction(model, match, t)

    # v = K^{-1} k(theta)
    kvec, v = kernel_weights(model, theta)
    if not np.any(v):
        return _prior_prediction(model, t)

    degenerate = _degenerate(v)
    if np.any(degenerate):
        return _predict_excluding(model, theta, t, degenerate, allow_exclusion)

    # eps^2 = 1 - k^T K^{-1} k
    noise = float(np.clip(1.0 - kvec @ v, 0.0, 1.0))
    w, q = factored_spectrum(pi_matrix(model, v), model.triangular, model.pivot)
    prior_dominated = noise > 1.0 - PRIOR_TOL
    if prior_dominated:
        logger.warning(f"prediction at {theta.tolist()} is dominated by the prior")
    return PredictiveSubspace(
        global_basis=model.global_basis, directions=q[:, :t], variances=w[:t],
        noise_variance=noise, k=model.k, prior_dominated=prior_dominated
    )


def _predict_excluding(model: GpsModel, theta: np.ndarray, t: int, degenerate: np.ndarray,
                       allow_exclusion: bool) -> PredictiveSubspace:
    dropped = np.flatnonzero(degenerate).tolist()
    if not allow_exclusion or np.all(degenerate):
        raise DegenerateWeightsError(
            "kernel weights vanish for some samples",
            context={"samples": dropped, "theta": theta.tolist()}
        )
    logger.warning(f"excluding samples {dropped} with vanishing kernel weights")
    reduced = model.subset(~degenerate)
    if t > reduced.rank:
        logger.warning(f"truncation reduced from {t} to {reduced.rank} after exclusion")
        t = reduced.rank
    return predict(reduced, theta, t, allow_exclusion=False)


def predict_many(model: GpsModel, thetas: Any, t: Optional[int] = None,
                 num_threads: Optional[int] = None) -> List[PredictiveSubspace]:
    """Predictions for each row of thetas, in input order"""
    targets = as_points(thetas)
    workers = resolve_num_threads(num_threads)
    if workers == 1:
        return [predict(model, theta, t) for theta in targets]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda theta: predict(model, theta, t), targets))


def predictive_covariance_dense(model: GpsModel, theta: Any) -> np.ndarray:
    """
    Literal dense predictive covariance
    Sigma = eps^2 I + X [Xb^T (K~ kron I_n) Xb]^{-1} X^T with Xb = blockdiag(X_i)
    """
    if model.n > DENSE_LIMIT:
        raise ShapeMismatchError(f"dense covariance limited to n <= {DENSE_LIMIT}, got {model.n}")
    theta = _check_target(model, theta)
    match = _match_training_point(model, theta)
    if match is not None:
        x_i = model.bases[match].entries
        return x_i @ x_i.T

    kvec, v = kernel_weights(model, theta)
    degenerate = _degenerate(v) if np.any(v) else np.ones_like(v, dtype=bool)
    if np.any(degenerate):
        if np.all(degenerate):
            raise DegenerateWeightsError("kernel weights vanish for every sample")
        return predictive_covariance_dense(model.subset(~degenerate), theta)

    noise = float(np.clip(1.0 - kvec @ v, 0.0, 1.0))
    k_tilde = spla.inv(v[:, None] * model.corr * v[None, :])
    blocks = spla.block_diag(*[b.entries for b in model.bases])
    middle = blocks.T @ np.kron(k_tilde, np.eye(model.n)) @ blocks
    x = model.stacked()
    sigma = noise * np.eye(model.n) + x @ spla.solve(middle, x.T, assume_a="sym")
    return 0.5 * (sigma + sigma.T)


def sample_predictive(pred: PredictiveSubspace, rng: np.random.Generator) -> StiefelBasis:
    """
    Draw from the predictive MACG(Sigma) through the factored square root
    M = W diag(sqrt(lambda + eps^2) - eps) W^T Z + eps Z, W = global basis @ directions
    """
    w = pred.principal_directions()
    z = rng.standard_normal((pred.n, pred.k))
    eps = np.sqrt(pred.noise_variance)
    scale = np.sqrt(pred.variances + pred.noise_variance) - eps
    return project_pi(w @ (scale[:, None] * (w.T @ z)) + eps * z)


def predictive_interval(pred: PredictiveSubspace, rng: np.random.Generator, level: float = 0.95,
                        draws: int = 1000) -> float:
    """Radius, in Riemannian distance from the mean subspace, holding `level` of the predictive mass"""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    mean = pred.mean_basis()
    dists = [riemannian_distance(sample_predictive(pred, rng), mean) for _ in range(draws)]
    return float(np.quantile(dists, level))


def sample_path(grid: Any, kernel: KernelSpec, n: int, k: int,
                rng: np.random.Generator) -> List[StiefelBasis]:
    """
    Joint draw of subspaces along a parameter grid by sequential conditioning

    Parameters:
    -----------
    grid : array-like
        Parameter points, in sampling order
    kernel : KernelSpec
        Correlation function of the GP prior
    n, k : int
        Ambient and subspace dimensions
    rng : np.random.Generator
        Random source

    Returns:
    --------
    List[StiefelBasis]
        One subspace per grid point
    """
    pts = as_points(grid)
    if pts.shape[0] == 0:
        raise EmptySampleError("sampling grid is empty")
    # first draw from the prior, then each from the GP conditioned on all earlier ones
    draws = [sample_uniform(n, k, rng)]
    for i in range(1, pts.shape[0]):
        model = fit(pts[:i], draws, kernel)
        pred = predict(model, pts[i], t=model.rank)
        draws.append(sample_predictive(pred, rng))
    return draws


def reduced_operator(pred: PredictiveSubspace, a_r: np.ndarray) -> np.ndarray:
    """V_k^T A_r V_k for an operator already projected onto the global basis"""
    a_r = np.asarray(a_r, dtype=float)
    if a_r.shape != (pred.rank, pred.rank):
        raise ShapeMismatchError(f"projected operator must be {pred.rank}x{pred.rank}, got {a_r.shape}")
    vk = pred.mean_coordinates()
    return vk.T @ a_r @ vk


def macg_log_density(pred: PredictiveSubspace, basis: StiefelBasis) -> float:
    """
    Unnormalized MACG log-density -1/2 (k log|Sigma| + n log|X^T Sigma^{-1} X|),
    with the eigenvalues of the truncated directions outside V W taken as zero
    """
    eps2 = pred.noise_variance
    if eps2 <= 0.0:
        raise NumericalError("density is undefined for a singular predictive covariance")
    if basis.n != pred.n or basis.k != pred.k:
        raise DimensionMismatchError("basis does not match the predictive distribution")
    n, k = pred.n, pred.k
    lam = pred.variances
    logdet_sigma = np.sum(np.log(lam + eps2)) + (n - pred.truncation) * np.log(eps2)
    cw = pred.directions.T @ (pred.global_basis.T @ basis.entries)
    quad = cw.T @ (cw / (lam + eps2)[:, None]) + (basis.entries.T @ basis.entries - cw.T @ cw) / eps2
    sign, logdet_quad = np.linalg.slogdet(0.5 * (quad + quad.T))
    if sign <= 0:
        raise NumericalError("quadratic form in the MACG density is not positive definite")
    return float(-0.5 * (k * logdet_sigma + n * logdet_quad))
