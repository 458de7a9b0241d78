"""
Model selection for GPS
Leave-one-out predictive error and its length-scale gradient, tuning,
the rule-of-thumb default, and likelihood-based diagnostics
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg as spla
from scipy.optimize import minimize, minimize_scalar

from config import resolve_num_threads
from error_handler import (
    DegenerateSpectrumError,
    DegenerateWeightsError,
    EmptySampleError,
    InputError,
    NumericalError,
    SingularCorrelationError,
)
from gps import (
    WEIGHT_TOL,
    GpsModel,
    PredictiveSubspace,
    cholesky_with_fallback,
    macg_log_density,
    predict,
)
from grassmann import riemannian_distance
from kernel import corr_matrix_grad

logger = logging.getLogger(__name__)

GAP_TOL = 1e-12
SIGMA_GUARD = 1e-8
FD_STEP = 1e-4
ZERO_ERROR = 1e-20


@dataclass
class LoocvReport:
    total_error: float
    per_point: np.ndarray
    beta: np.ndarray
    gradient: Optional[np.ndarray] = None
    flagged_folds: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        payload = {
            "total_error": float(self.total_error),
            "per_point": [float(e) for e in self.per_point],
            "beta": [float(b) for b in self.beta],
            "flagged_folds": list(self.flagged_folds)
        }
        if self.gradient is not None:
            payload["gradient"] = [float(g) for g in self.gradient]
        return payload


@dataclass
class TuneResult:
    beta_star: np.ndarray
    trace: List[Tuple[np.ndarray, float]]
    converged: bool

    @property
    def best_error(self) -> float:
        return min(e for _, e in self.trace)

    def trace_frame(self) -> pd.DataFrame:
        """Evaluations as a table with columns beta_1.., epsilon2"""
        width = len(self.beta_star)
        rows = [list(beta) + [err] for beta, err in self.trace]
        columns = [f"beta_{j + 1}" for j in range(width)] + ["epsilon2"]
        return pd.DataFrame(rows, columns=columns)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "beta_star": [float(b) for b in self.beta_star],
            "converged": bool(self.converged),
            "best_error": float(self.best_error),
            "trace": [{"beta": [float(b) for b in beta], "epsilon2": float(e)}
                      for beta, e in self.trace]
        }


@dataclass
class _Fold:
    """Fast-path quantities of one left-out sample, reused by the gradient"""
    index: int
    others: np.ndarray
    cols: np.ndarray
    chol: np.ndarray
    lt: np.ndarray
    lam: np.ndarray
    q: np.ndarray
    c_i: np.ndarray
    kii: float
    kbar_i: np.ndarray
    delta: np.ndarray
    error: float


def parameter_ranges(points: np.ndarray) -> np.ndarray:
    """Per-dimension spread of the training points; 1 where a dimension is constant"""
    ranges = np.ptp(points, axis=0).astype(float)
    ranges[ranges == 0.0] = 1.0
    return ranges


def rule_of_thumb(d: int, l: int, ranges: Any) -> np.ndarray:
    """
    Default length-scales beta_i = 3 d^{3/2} / l * range_i

    Parameters:
    -----------
    d : int
        Parameter dimension
    l : int
        Number of training points
    ranges : array-like
        Parameter ranges, one per dimension (or a scalar)

    Returns:
    --------
    np.ndarray
        Length-scales
    """
    ranges = np.atleast_1d(np.asarray(ranges, dtype=float))
    if d < 1 or l < 1 or np.any(ranges <= 0):
        raise InputError(f"rule of thumb needs d >= 1, l >= 1 and positive ranges")
    if ranges.size == 1 and d > 1:
        ranges = np.full(d, ranges[0])
    return 3.0 * d ** 1.5 / l * ranges


def default_lengthscales(model: GpsModel) -> np.ndarray:
    ranges = parameter_ranges(model.points)
    beta = rule_of_thumb(model.d, model.l, ranges)
    if model.kernel.shared:
        return np.array([beta.mean()])
    return beta


def _prepare(model: GpsModel, beta: Optional[Any]) -> Tuple[GpsModel, np.ndarray]:
    if beta is not None:
        model = model.with_kernel(model.kernel.with_lengthscales(beta))
    kbar = spla.cho_solve(model.corr_factor, np.eye(model.l))
    return model, 0.5 * (kbar + kbar.T)


def _fold(model: GpsModel, kbar: np.ndarray, coeffs: np.ndarray, i: int) -> _Fold:
    k = model.k
    others = np.delete(np.arange(model.l), i)
    # weights of the other samples in the held-out prediction
    kbar_i = kbar[others, i]
    kii = kbar[i, i]
    if not np.any(kbar_i) or np.any(np.abs(kbar_i) < WEIGHT_TOL * np.max(np.abs(kbar_i))):
        raise DegenerateWeightsError(f"leave-one-out weights vanish in fold {i}")

    # Pi of the fold built from K^{-1} alone, no refactorization
    delta = kbar[np.ix_(others, others)] * kii / np.outer(kbar_i, kbar_i) - 1.0
    cols = np.concatenate([np.arange(p * k, (p + 1) * k) for p in others])
    pi = model.gram[np.ix_(cols, cols)] * np.kron(delta, np.ones((k, k)))
    chol = cholesky_with_fallback(0.5 * (pi + pi.T))
    lt = spla.solve_triangular(chol, coeffs[:, cols].T, lower=True)
    s = lt.T @ lt
    # S = C Pi^{-1} C^T in the r-dim global frame
    w, q = spla.eigh(0.5 * (s + s.T))
    lam, q = np.clip(w[::-1], 0.0, None), q[:, ::-1]

    c_i = coeffs[:, model.block(i)]
    angles = spla.subspace_angles(c_i, q[:, :k])
    return _Fold(
        index=i, others=others, cols=cols, chol=chol, lt=lt, lam=lam, q=q,
        c_i=c_i, kii=kii, kbar_i=kbar_i, delta=delta, error=float(np.sum(angles ** 2))
    )


def _refit_fold_error(model: GpsModel, i: int) -> float:
    others = np.delete(np.arange(model.l), i)
    pred = predict(model.subset(others), model.points[i], t=model.k)
    return riemannian_distance(pred.mean_basis(), model.bases[i]) ** 2


def _evaluate_folds(model: GpsModel, kbar: np.ndarray,
                    num_threads: Optional[int]) -> List[Tuple[float, Optional[_Fold]]]:
    coeffs = model.coefficients

    def run(i: int) -> Tuple[float, Optional[_Fold]]:
        try:
            fold = _fold(model, kbar, coeffs, i)
            return fold.error, fold
        except (DegenerateWeightsError, NumericalError) as e:
            logger.warning(f"fold {i} falls back to refitting: {e}")
            return _refit_fold_error(model, i), None

    workers = resolve_num_threads(num_threads)
    if workers == 1:
        return [run(i) for i in range(model.l)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, range(model.l)))


def loocv_error(model: GpsModel, beta: Optional[Any] = None,
                num_threads: Optional[int] = None) -> LoocvReport:
    """
    Leave-one-out predictive error: sum over samples of the squared Riemannian distance
    between each held-out subspace and the mean prediction from the others

    Parameters:
    -----------
    model : GpsModel
        Fitted model, l >= 3
    beta : array-like, optional
        Length-scales to evaluate; the model's kernel otherwise
    num_threads : int, optional
        Worker cap for evaluating folds

    Returns:
    --------
    LoocvReport
        Total and per-sample errors
    """
    if model.l < 3:
        raise EmptySampleError("leave-one-out needs at least three samples")
    model, kbar = _prepare(model, beta)
    results = _evaluate_folds(model, kbar, num_threads)
    per_point = np.array([err for err, _ in results])
    flagged = [i for i, (_, fold) in enumerate(results) if fold is None]
    logger.debug(f"LOOCV per-point errors: {per_point.tolist()}")
    return LoocvReport(
        total_error=float(np.sum(per_point)), per_point=per_point,
        beta=np.array(model.kernel.lengthscales), flagged_folds=flagged
    )


def _arccos_ratio(sigma: np.ndarray) -> np.ndarray:
    """arccos(s) / sqrt(1 - s^2), continued by its series 1 + (1 - s)/3 near s = 1"""
    s = np.clip(sigma, -1.0, 1.0)
    out = np.empty_like(s)
    near = s > 1.0 - SIGMA_GUARD
    far = ~near
    out[far] = np.arccos(s[far]) / np.sqrt(1.0 - s[far] ** 2)
    out[near] = 1.0 + (1.0 - s[near]) / 3.0
    return out


def _eigvec_derivative(lam: np.ndarray, q: np.ndarray, y: np.ndarray, k: int,
                       tau: int, exact: bool) -> np.ndarray:
    """
    Derivatives of the top-k eigenvectors given y[:, p] = dS v_p

    Couplings among the top k are dropped: they rotate the leading eigenspace within
    itself and leave the singular values of C_i^T V unchanged.
    """
    r = lam.size
    out = np.zeros_like(y)
    exact = exact or tau >= r
    tau = max(tau, k)
    for p in range(k):
        yp = y[:, p]
        if exact:
            tail = q[:, k:]
            out[:, p] = tail @ ((tail.T @ yp) / (lam[p] - lam[k:]))
        else:
            # eigenvalues past tau taken as zero: the rest of the range goes through the projector
            mid = q[:, k:tau]
            head = q[:, :tau]
            out[:, p] = (mid @ ((mid.T @ yp) / (lam[p] - lam[k:tau]))
                         + (yp - head @ (head.T @ yp)) / lam[p])
    return out


def _fold_gradient(model: GpsModel, kbar: np.ndarray, fold: _Fold, dkbars: Sequence[np.ndarray],
                   tau: int, exact: bool) -> np.ndarray:
    k = model.k
    lam, q = fold.lam, fold.q
    if lam.size > k and lam[k - 1] - lam[k] < GAP_TOL * max(lam[0], np.finfo(float).tiny):
        raise DegenerateSpectrumError(f"eigengap below the k-th eigenvalue vanishes in fold {fold.index}")

    vk = q[:, :k]
    uh, sigma, wh_t = spla.svd(fold.c_i.T @ vk)
    weights = -2.0 * _arccos_ratio(sigma)
    left = fold.c_i @ uh
    right = wh_t.T

    # Pi^{-1} C^T
    g = spla.solve_triangular(fold.chol.T, fold.lt, lower=False)
    others, i = fold.others, fold.index
    kbar_oo = kbar[np.ix_(others, others)]
    shifted = fold.delta + 1.0
    outer = np.outer(fold.kbar_i, fold.kbar_i)
    gram_oo = model.gram[np.ix_(fold.cols, fold.cols)]
    ones = np.ones((k, k))

    grad = np.zeros(len(dkbars))
    for h, dkbar in enumerate(dkbars):
        ratio = dkbar[others, i] / fold.kbar_i
        d_delta = ((dkbar[np.ix_(others, others)] * fold.kii + kbar_oo * dkbar[i, i]) / outer
                   - shifted * (ratio[:, None] + ratio[None, :]))
        d_pi = gram_oo * np.kron(d_delta, ones)
        # columns dS v_p with dS = -C Pi^{-1} dPi Pi^{-1} C^T
        y = -g.T @ (d_pi @ (g @ vk))
        dv = _eigvec_derivative(lam, q, y, k, tau, exact)
        d_sigma = np.sum(left * (dv @ right), axis=0)
        grad[h] = weights @ d_sigma
    return grad


def _fd_gradient(model: GpsModel, beta: np.ndarray, num_threads: Optional[int]) -> np.ndarray:
    grad = np.zeros(beta.size)
    for h in range(beta.size):
        step = FD_STEP * beta[h]
        up, down = beta.copy(), beta.copy()
        up[h] += step
        down[h] -= step
        grad[h] = (loocv_error(model, up, num_threads).total_error
                   - loocv_error(model, down, num_threads).total_error) / (2.0 * step)
    return grad


def loocv_gradient(model: GpsModel, beta: Optional[Any] = None, tau: Optional[int] = None,
                   exact: bool = False, num_threads: Optional[int] = None) -> np.ndarray:
    """
    Analytic gradient of the leave-one-out error in the length-scales

    Parameters:
    -----------
    model : GpsModel
        Fitted model, l >= 3
    beta : array-like, optional
        Length-scales; the model's kernel otherwise
    tau : int, optional
        Eigenpairs kept in the approximate pseudo-inverse; defaults to 2k
        The remaining eigenvalues are treated as zero, which is exact only when every fold
        spectrum beyond tau is negligible
    exact : bool
        Use the full eigendecomposition instead of the truncated approximation
    num_threads : int, optional
        Worker cap for evaluating folds

    Returns:
    --------
    np.ndarray
        One entry per kernel hyperparameter
    """
    if model.l < 3:
        raise EmptySampleError("leave-one-out needs at least three samples")
    model, kbar = _prepare(model, beta)
    beta = np.array(model.kernel.lengthscales, dtype=float)
    tau = 2 * model.k if tau is None else int(tau)

    results = _evaluate_folds(model, kbar, num_threads)
    if any(fold is None for _, fold in results):
        logger.warning("refitted folds present; using a finite-difference gradient")
        return _fd_gradient(model, beta, num_threads)

    # dK^{-1} = -K^{-1} dK K^{-1}
    dkbars = [-kbar @ dk @ kbar for dk in corr_matrix_grad(model.kernel, model.points)]
    grad = np.zeros(len(dkbars))
    try:
        for _, fold in results:
            grad += _fold_gradient(model, kbar, fold, dkbars, tau, exact)
    except DegenerateSpectrumError as e:
        logger.warning(f"{e}; using a finite-difference gradient")
        return _fd_gradient(model, beta, num_threads)
    return grad


def tune(model: GpsModel, bounds: Optional[Tuple[Any, Any]] = None, init: Optional[Any] = None,
         max_iters: int = 50, threshold: float = 0.01,
         num_threads: Optional[int] = None) -> TuneResult:
    """
    Length-scales minimizing the leave-one-out error, searched in log beta

    One hyperparameter: bounded golden-section/parabolic search with tolerance `threshold`.
    Several: L-BFGS-B with the analytic gradient, using the full eigendecomposition since
    the 2k truncation is only accurate when the fold spectra beyond 2k are negligible.

    Parameters:
    -----------
    model : GpsModel
        Fitted model
    bounds : (lower, upper), optional
        Search box; defaults to the rule of thumb +/- 30%
    init : array-like, optional
        Starting length-scales; defaults to the middle of the box
    max_iters : int
        Iteration cap of the optimizer
    threshold : float
        Convergence tolerance on log beta
    num_threads : int, optional
        Worker cap for evaluating folds

    Returns:
    --------
    TuneResult
        Best length-scales, the evaluation trace, and the optimizer status
    """
    n_hyper = model.kernel.n_hyper
    if bounds is None:
        center = default_lengthscales(model)
        lower, upper = 0.7 * center, 1.3 * center
    else:
        lower = np.broadcast_to(np.asarray(bounds[0], dtype=float), (n_hyper,)).copy()
        upper = np.broadcast_to(np.asarray(bounds[1], dtype=float), (n_hyper,)).copy()
    start = 0.5 * (lower + upper) if init is None else np.broadcast_to(
        np.asarray(init, dtype=float), (n_hyper,)).copy()
    if np.any(lower <= 0) or np.any(lower >= upper) or np.any(start < lower) or np.any(start > upper):
        raise InputError(f"invalid search box [{lower}, {upper}] for start {start}")

    trace: List[Tuple[np.ndarray, float]] = []

    def objective(log_beta: np.ndarray) -> float:
        beta = np.exp(np.atleast_1d(log_beta))
        err = loocv_error(model, beta, num_threads).total_error
        trace.append((beta, err))
        logger.info(f"LOOCV error {err:.6e} at beta={beta.tolist()}")
        return err

    start_error = objective(np.log(start))
    # nothing left to improve
    if start_error <= ZERO_ERROR:
        return TuneResult(beta_star=start, trace=trace, converged=True)

    if n_hyper == 1:
        res = minimize_scalar(
            lambda x: objective(np.array([x])),
            bounds=(float(np.log(lower[0])), float(np.log(upper[0]))),
            method="bounded", options={"xatol": threshold, "maxiter": max_iters}
        )
    else:
        def value_and_grad(log_beta: np.ndarray) -> Tuple[float, np.ndarray]:
            beta = np.exp(log_beta)
            err = objective(log_beta)
            return err, loocv_gradient(model, beta, exact=True, num_threads=num_threads) * beta

        res = minimize(
            value_and_grad, np.log(start), jac=True, method="L-BFGS-B",
            bounds=list(zip(np.log(lower), np.log(upper))), options={"maxiter": max_iters}
        )
    converged = bool(res.success)

    # the optimizer may stop on a worse iterate than one it visited
    best_beta, best_error = min(trace, key=lambda item: item[1])
    if best_error >= start_error and not converged:
        logger.warning("tuning did not improve on the starting length-scales")
        return TuneResult(beta_star=start, trace=trace, converged=False)
    return TuneResult(beta_star=np.array(best_beta), trace=trace, converged=converged)


def log_modified_marginal_likelihood(model: GpsModel, beta: Optional[Any] = None) -> float:
    """
    Log modified marginal likelihood
    -1/2 (n-k) k l log(2 pi) - k/2 (n log|K| + log|B|), B = gram o (K^{-1} kron J_k)
    """
    model, kbar = _prepare(model, beta)
    n, k, l = model.n, model.k, model.l
    logdet_k = 2.0 * np.sum(np.log(np.diag(model.corr_factor[0])))
    breve = model.gram * np.kron(kbar, np.ones((k, k)))
    try:
        chol = spla.cholesky(0.5 * (breve + breve.T), lower=True)
    except np.linalg.LinAlgError:
        raise SingularCorrelationError("weighted Gram matrix is not positive definite")
    logdet_b = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (n - k) * k * l * np.log(2.0 * np.pi) - 0.5 * k * (n * logdet_k + logdet_b))


def fold_predictive(model: GpsModel, fold: _Fold) -> PredictiveSubspace:
    """Leave-one-out predictive distribution of a fold, from the fast-path factors"""
    noise = float(np.clip(1.0 / fold.kii - model.kernel.jitter, 0.0, 1.0))
    return PredictiveSubspace(
        global_basis=model.global_basis, directions=fold.q, variances=fold.lam / fold.kii,
        noise_variance=noise, k=model.k
    )


def loocv_log_density(model: GpsModel, beta: Optional[Any] = None,
                      num_threads: Optional[int] = None) -> float:
    """Sum over samples of the MACG log-density of each held-out subspace under its LOO prediction"""
    if model.l < 3:
        raise EmptySampleError("leave-one-out needs at least three samples")
    model, kbar = _prepare(model, beta)
    total = 0.0
    for i, (_, fold) in enumerate(_evaluate_folds(model, kbar, num_threads)):
        if fold is None:
            reduced = model.subset(np.delete(np.arange(model.l), i))
            pred = predict(reduced, model.points[i], t=reduced.rank)
        else:
            pred = fold_predictive(model, fold)
        total += macg_log_density(pred, model.bases[i])
    return float(total)
