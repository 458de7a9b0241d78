"""
Parametric reduced-order modeling harness
Synthetic convection-diffusion systems, implicit-Euler snapshots, POD, Galerkin reduction,
the relative L2 state error, and the benchmark comparing basis predictors
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg as spla
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.stats import qmc

from baseline import InterpConfig, Scheme, subspace_interpolate
from config import resolve_num_threads
from error_handler import (
    BadDimensionError,
    ConfigError,
    GpsError,
    InputError,
    RankDeficientError,
    ShapeMismatchError,
    SingularStepError,
    ZeroNormError,
    error_handler,
)
from gps import GpsModel, PredictiveSubspace, fit, predict, reduced_operator
from grassmann import StiefelBasis, riemannian_distance
from kernel import DEFAULT_JITTER, KernelSpec, as_point, as_points
from model_selection import default_lengthscales, tune

logger = logging.getLogger(__name__)

Matrix = Union[np.ndarray, sp.spmatrix]
METHODS = ("local_pod", "gps", "interp")


def _constant(value: float) -> Callable[[np.ndarray], float]:
    return lambda theta: value


def velocity(s: float) -> float:
    """Convection speed for a normalized coordinate in [0, 1], mapped to [0.1, 2]"""
    return 0.1 + 1.9 * s


@dataclass(frozen=True, eq=False)
class AffineTerm:
    matrix: Matrix
    coefficient: Callable[[np.ndarray], float]


@dataclass(frozen=True, eq=False)
class LtiSystem:
    """
    Parametric first-order system E(theta) x' = A(theta) x + B u, y = C x,
    with E and A affine in coefficient functions of theta
    """
    e_terms: Tuple[AffineTerm, ...]
    a_terms: Tuple[AffineTerm, ...]
    b: np.ndarray
    c: np.ndarray
    theta: np.ndarray

    @property
    def n(self) -> int:
        return self.b.shape[0]

    @property
    def p(self) -> int:
        return self.b.shape[1]

    @property
    def q(self) -> int:
        return self.c.shape[0]

    @classmethod
    def from_matrices(cls, e: Any, a: Any, b: Any, c: Any) -> "LtiSystem":
        """Parameter-independent system"""
        b = np.atleast_2d(np.asarray(b, dtype=float))
        c = np.atleast_2d(np.asarray(c, dtype=float))
        if b.shape[0] == 1 and b.shape[1] > 1:
            b = b.T
        e = sp.csc_matrix(np.atleast_2d(e)) if not sp.issparse(e) else e
        a = sp.csc_matrix(np.atleast_2d(a)) if not sp.issparse(a) else a
        if e.shape != (b.shape[0], b.shape[0]) or a.shape != e.shape or c.shape[1] != b.shape[0]:
            raise ShapeMismatchError("inconsistent system matrices")
        one = _constant(1.0)
        return cls((AffineTerm(e, one),), (AffineTerm(a, one),), b, c, np.zeros(0))

    def at(self, theta: Any) -> "LtiSystem":
        return replace(self, theta=as_point(theta))

    def _assemble(self, terms: Tuple[AffineTerm, ...], theta: Optional[Any]) -> sp.csc_matrix:
        theta = self.theta if theta is None else as_point(theta)
        total = sp.csc_matrix((self.n, self.n))
        for term in terms:
            total = total + term.coefficient(theta) * sp.csc_matrix(term.matrix)
        return total.tocsc()

    def e_matrix(self, theta: Optional[Any] = None) -> sp.csc_matrix:
        return self._assemble(self.e_terms, theta)

    def a_matrix(self, theta: Optional[Any] = None) -> sp.csc_matrix:
        return self._assemble(self.a_terms, theta)

    def step_operators(self) -> Tuple[Matrix, Matrix, np.ndarray]:
        return self.e_matrix(), self.a_matrix(), self.b


@dataclass(frozen=True, eq=False)
class RomModel:
    """Galerkin reduced model E_r = V^T E V, A_r = V^T A V, B_r = V^T B, C_r = C V"""
    basis: StiefelBasis
    e_r: np.ndarray
    a_r: np.ndarray
    b_r: np.ndarray
    c_r: np.ndarray

    @property
    def k(self) -> int:
        return self.e_r.shape[0]

    def step_operators(self) -> Tuple[Matrix, Matrix, np.ndarray]:
        return self.e_r, self.a_r, self.b_r


@dataclass(frozen=True, eq=False)
class SnapshotSet:
    states: np.ndarray
    times: np.ndarray


def _difference_operator(n: int) -> sp.csr_matrix:
    """(n+1) x n forward differences across all cell edges, Dirichlet ends"""
    return sp.diags([np.ones(n + 1), -np.ones(n)], [0, -1], shape=(n + 1, n), format="csr")


def build_test_system(n: int, theta: Any) -> LtiSystem:
    """
    Centered finite-difference convection-diffusion on [0, 1] with Dirichlet boundaries

    Parameters:
    -----------
    n : int
        Number of interior nodes, at least 10
    theta : array-like
        Point of [0, 1]^d with d = 1 (velocity) or d = 3 (fluid fraction c,
        fluid conductivity kappa, velocity v)

    Returns:
    --------
    LtiSystem
        The parametric system, evaluated by default at theta
    """
    theta = as_point(theta)
    if theta.size not in (1, 3):
        raise BadDimensionError(f"test system has d = 1 or d = 3 parameters, got {theta.size}")
    if n < 10:
        raise BadDimensionError(f"test system needs n >= 10, got {n}")
    if np.any(theta < 0.0) or np.any(theta > 1.0):
        raise InputError(f"parameters must lie in [0, 1], got {theta.tolist()}")

    h = 1.0 / (n + 1)
    nodes = h * np.arange(1, n + 1)
    diff_op = _difference_operator(n)
    laplacian = (-(diff_op.T @ diff_op) / h ** 2).tocsc()
    # -(x_{i+1} - x_{i-1}) / 2h
    central = sp.diags([np.ones(n - 1), -np.ones(n - 1)], [-1, 1], shape=(n, n)) / (2.0 * h)

    b = np.zeros((n, 1))
    b[n // 4, 0] = 1.0
    c = np.zeros((1, n))
    c[0, n // 2] = 1.0
    c[0, (3 * n) // 4] = -1.0

    identity = sp.identity(n, format="csc")
    if theta.size == 1:
        e_terms = (AffineTerm(identity, _constant(1.0)),)
        a_terms = (
            AffineTerm(laplacian, _constant(1.0)),
            AffineTerm(central.tocsc(), lambda th: velocity(th[0])),
        )
    else:
        fluid = ((nodes > 0.3) & (nodes < 0.7)).astype(float)
        edges = h * (np.arange(n + 1) + 0.5)
        fluid_edges = sp.diags(((edges > 0.3) & (edges < 0.7)).astype(float))
        fluid_nodes = sp.diags(fluid)
        e_terms = (
            AffineTerm(identity, _constant(1.0)),
            AffineTerm(fluid_nodes.tocsc(), lambda th: th[0]),
        )
        a_terms = (
            AffineTerm((0.5 * laplacian).tocsc(), _constant(1.0)),
            AffineTerm((-(diff_op.T @ fluid_edges @ diff_op) / h ** 2).tocsc(), lambda th: 1.0 + th[1]),
            AffineTerm((fluid_nodes @ central @ fluid_nodes).tocsc(), lambda th: th[0] * velocity(th[2])),
        )
    return LtiSystem(e_terms, a_terms, b, c, theta)


def _step_solver(step: Matrix) -> Callable[[np.ndarray], np.ndarray]:
    if sp.issparse(step):
        try:
            lu = splu(sp.csc_matrix(step))
        except RuntimeError as e:
            raise SingularStepError(f"implicit-Euler step matrix is singular: {e}")
        return lu.solve
    lu, piv = spla.lu_factor(step, check_finite=True)
    if np.any(np.diag(lu) == 0.0):
        raise SingularStepError("implicit-Euler step matrix is singular")
    return lambda rhs: spla.lu_solve((lu, piv), rhs)


def simulate(system: Union[LtiSystem, RomModel], u: Union[Callable[[float], Any], float],
             T: float, J: int) -> SnapshotSet:
    """
    Implicit Euler from x_0 = 0: (E - dt A) x_{i+1} = E x_i + dt B u(t_{i+1})

    Parameters:
    -----------
    system : LtiSystem or RomModel
        Full or reduced system
    u : callable or float
        Input signal u(t), or a constant input
    T : float
        Final time
    J : int
        Number of steps, dt = T / J

    Returns:
    --------
    SnapshotSet
        States at t_1 .. t_J as columns
    """
    if J < 1 or T <= 0:
        raise InputError(f"simulation needs J >= 1 and T > 0, got J={J}, T={T}")
    signal = u if callable(u) else (lambda t, value=float(u): value)
    e, a, b = system.step_operators()
    dt = T / J
    solve = _step_solver(e - dt * a)

    x = np.zeros(b.shape[0])
    states = np.empty((b.shape[0], J))
    times = dt * np.arange(1, J + 1)
    for i, t in enumerate(times):
        x = solve(e @ x + dt * (b @ np.atleast_1d(np.asarray(signal(t), dtype=float))))
        states[:, i] = x
    return SnapshotSet(states=states, times=times)


def pod_basis(snapshots: SnapshotSet, k: int) -> StiefelBasis:
    """Top-k left singular vectors of the snapshot matrix"""
    u, s, _ = spla.svd(snapshots.states, full_matrices=False)
    if k > s.size or s[0] == 0.0 or s[k - 1] / s[0] < 1e-12:
        raise RankDeficientError(f"snapshots do not have rank {k}")
    return StiefelBasis(u[:, :k])


def galerkin_reduce(system: LtiSystem, basis: StiefelBasis, theta: Optional[Any] = None) -> RomModel:
    """Galerkin projection onto span(V) at theta (the system's own point by default)"""
    if basis.n != system.n:
        raise ShapeMismatchError(f"basis has n={basis.n}, system has n={system.n}")
    v = basis.entries
    return RomModel(
        basis=basis,
        e_r=v.T @ (system.e_matrix(theta) @ v),
        a_r=v.T @ (system.a_matrix(theta) @ v),
        b_r=v.T @ system.b,
        c_r=system.c @ v
    )


def relative_l2_state_error(full: SnapshotSet, rom_states: np.ndarray, basis: StiefelBasis) -> float:
    """sqrt(sum_i |x(t_i) - V x_r(t_i)|^2 dt) / sqrt(sum_i |x(t_i)|^2 dt)"""
    rom_states = np.asarray(rom_states, dtype=float)
    if rom_states.shape != (basis.k, full.states.shape[1]) or basis.n != full.states.shape[0]:
        raise ShapeMismatchError("reduced trajectory does not match the full time grid")
    dt = np.diff(np.concatenate([[0.0], full.times]))
    norm = np.sqrt(np.sum(full.states ** 2 * dt))
    if norm == 0.0:
        raise ZeroNormError("full trajectory is identically zero")
    residual = full.states - basis.entries @ rom_states
    return float(np.sqrt(np.sum(residual ** 2 * dt)) / norm)


class GlobalProjection:
    """
    Affine system terms projected once onto a GPS model's global basis,
    so each predicted ROM is assembled from order-r matrices
    """

    def __init__(self, system: LtiSystem, model: GpsModel):
        self.system = system
        self.model = model
        vt = model.global_basis
        self.e_terms = [(vt.T @ (term.matrix @ vt), term.coefficient) for term in system.e_terms]
        self.a_terms = [(vt.T @ (term.matrix @ vt), term.coefficient) for term in system.a_terms]
        self.b_r = vt.T @ system.b
        self.c_r = system.c @ vt

    def rom(self, pred: PredictiveSubspace, theta: Any) -> RomModel:
        """Reduced model at theta on the predicted mean subspace"""
        if pred.global_basis is not self.model.global_basis:
            # prediction came from a refitted model after weight exclusion
            return galerkin_reduce(self.system, pred.mean_basis(), theta)
        theta = as_point(theta)
        e_r = sum(coef(theta) * mat for mat, coef in self.e_terms)
        a_r = sum(coef(theta) * mat for mat, coef in self.a_terms)
        vk = pred.mean_coordinates()
        return RomModel(
            basis=StiefelBasis(self.model.global_basis @ vk),
            e_r=reduced_operator(pred, e_r),
            a_r=reduced_operator(pred, a_r),
            b_r=vk.T @ self.b_r,
            c_r=self.c_r @ vk
        )


def training_design(kind: str, l: int, d: int, seed: int = 0) -> np.ndarray:
    """Training parameters in [0, 1]^d: an equispaced grid or a seeded Latin hypercube"""
    if kind == "equispaced":
        side = int(round(l ** (1.0 / d)))
        if side ** d != l or side < 2:
            raise ConfigError(f"an equispaced design needs l to be a d-th power, got l={l}, d={d}")
        axes = np.meshgrid(*[np.linspace(0.0, 1.0, side)] * d, indexing="ij")
        return np.column_stack([axis.ravel() for axis in axes])
    if kind == "lhs":
        return qmc.LatinHypercube(d=d, seed=seed).random(l)
    raise ConfigError(f"unknown training design {kind!r}")


@dataclass
class BenchmarkConfig:
    n: int = 400
    d: int = 1
    k: int = 10
    design: str = "equispaced"
    l: int = 7
    train_seed: int = 0
    test_count: int = 50
    test_seed: int = 1
    test_points: Optional[np.ndarray] = None
    methods: Tuple[str, ...] = METHODS
    kernel: Dict[str, Any] = field(default_factory=dict)
    tuning: str = "rule"
    interp: Dict[str, Any] = field(default_factory=dict)
    final_time: float = 1.0
    steps: int = 200

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if self.tuning not in ("loocv", "rule"):
            raise ConfigError(f"tuning must be 'loocv' or 'rule', got {self.tuning!r}")

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "BenchmarkConfig":
        try:
            system = payload.get("system", {})
            train = payload.get("train", {})
            test = payload.get("test", {})
            snapshots = payload.get("snapshots", {})
            points = test.get("points")
            return cls(
                n=int(system.get("n", 400)),
                d=int(system.get("d", 1)),
                k=int(payload.get("k", 10)),
                design=train.get("design", "equispaced"),
                l=int(train.get("l", 7)),
                train_seed=int(train.get("seed", 0)),
                test_count=int(test.get("count", 50)),
                test_seed=int(test.get("seed", 1)),
                test_points=None if points is None else as_points(points),
                methods=tuple(payload.get("methods", METHODS)),
                kernel=dict(payload.get("kernel", {})),
                tuning=payload.get("tuning", "rule"),
                interp=dict(payload.get("interp", {})),
                final_time=float(snapshots.get("T", 1.0)),
                steps=int(snapshots.get("J", 200))
            )
        except (TypeError, ValueError, AttributeError) as e:
            raise ConfigError(f"malformed benchmark configuration: {e}")

    @classmethod
    def from_json(cls, text: str) -> "BenchmarkConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"benchmark configuration is not valid JSON: {e}")

    def interp_config(self) -> InterpConfig:
        payload = dict(self.interp)
        payload.setdefault("scheme", "lagrange" if self.d == 1 else "rbf")
        payload.setdefault("n_r", min(3 if self.d == 1 else 2 * self.d + 1, self.l))
        return InterpConfig.from_dict(payload)


@dataclass
class BenchmarkReport:
    rows: pd.DataFrame
    beta: np.ndarray
    fit_seconds: float
    rank: int

    def to_csv(self, path: Optional[str] = None) -> Optional[str]:
        return self.rows.to_csv(path, index=False)


class BenchmarkRunner:
    """
    Runs the comparison of basis predictors on the synthetic system

    Parameters:
    -----------
    config : BenchmarkConfig
        Sizes, designs, methods and kernel settings
    num_threads : int, optional
        Worker cap over test points; GPS_NUM_THREADS otherwise
    """

    def __init__(self, config: BenchmarkConfig, num_threads: Optional[int] = None):
        self.config = config
        self.num_threads = resolve_num_threads(num_threads)
        self.system = build_test_system(config.n, np.zeros(config.d))
        self.model: Optional[GpsModel] = None
        self.projection: Optional[GlobalProjection] = None
        self.points: Optional[np.ndarray] = None
        self.bases: List[StiefelBasis] = []
        self.interp = config.interp_config()
        self.fit_seconds = 0.0

    def _snapshots(self, theta: np.ndarray) -> SnapshotSet:
        return simulate(self.system.at(theta), 1.0, self.config.final_time, self.config.steps)

    def _kernel(self, points: np.ndarray) -> KernelSpec:
        spec = self.config.kernel
        beta = spec.get("lengthscales")
        shared = bool(spec.get("shared", False))
        if beta is None:
            beta = [1.0] if shared else [1.0] * self.config.d
        return KernelSpec(lengthscales=np.asarray(beta, dtype=float),
                          jitter=float(spec.get("jitter", DEFAULT_JITTER)), shared=shared)

    def train(self) -> GpsModel:
        """Simulate the training points, extract POD bases, fit and tune the GPS model"""
        cfg = self.config
        points = training_design(cfg.design, cfg.l, cfg.d, cfg.train_seed)
        bases = [pod_basis(self._snapshots(theta), cfg.k) for theta in points]
        self.points, self.bases = points, bases

        start = time.perf_counter()
        model = fit(points, bases, self._kernel(points))
        if "lengthscales" not in cfg.kernel:
            model = model.with_kernel(model.kernel.with_lengthscales(default_lengthscales(model)))
        if cfg.tuning == "loocv":
            result = tune(model, num_threads=self.num_threads)
            model = model.with_kernel(model.kernel.with_lengthscales(result.beta_star))
        self.fit_seconds = time.perf_counter() - start
        logger.info(f"GPS model ready: r={model.rank}, beta={model.kernel.lengthscales.tolist()}")

        self.model = model
        self.projection = GlobalProjection(self.system, model)
        return model

    def test_points(self) -> np.ndarray:
        cfg = self.config
        if cfg.test_points is not None:
            return cfg.test_points
        return np.random.default_rng(cfg.test_seed).uniform(size=(cfg.test_count, cfg.d))

    def _predict_basis(self, method: str, theta: np.ndarray,
                       local: StiefelBasis) -> Tuple[StiefelBasis, RomModel, float]:
        system = self.system.at(theta)
        start = time.perf_counter()
        if method == "local_pod":
            basis = local
            elapsed = time.perf_counter() - start
            return basis, galerkin_reduce(system, basis), elapsed
        if method == "gps":
            pred = predict(self.model, theta)
            elapsed = time.perf_counter() - start
            return pred.mean_basis(), self.projection.rom(pred, theta), elapsed
        basis = subspace_interpolate(theta, self.points, self.bases, self.interp)
        elapsed = time.perf_counter() - start
        return basis, galerkin_reduce(system, basis), elapsed

    def evaluate_point(self, theta: np.ndarray) -> List[Dict[str, Any]]:
        """One report row per method at a test parameter"""
        cfg = self.config
        full = self._snapshots(theta)
        local = pod_basis(full, cfg.k)
        coords = {f"theta_{j + 1}": float(value) for j, value in enumerate(theta)}
        rows = []
        for method in cfg.methods:
            row = {"method": method, **coords}
            try:
                basis, rom, elapsed = self._predict_basis(method, theta, local)
                reduced = simulate(rom, 1.0, cfg.final_time, cfg.steps)
                row["dg_to_local"] = riemannian_distance(basis, local)
                row["rel_l2_err"] = relative_l2_state_error(full, reduced.states, rom.basis)
                row["predict_ms"] = 1e3 * elapsed
            except GpsError as e:
                error_handler.log_error(e, {"method": method, "theta": theta.tolist()})
                row.update(dg_to_local=np.nan, rel_l2_err=np.nan, predict_ms=np.nan)
            rows.append(row)
        return rows

    def run(self, out_path: Optional[str] = None) -> BenchmarkReport:
        """Train, evaluate every test point, and optionally write the CSV report"""
        if self.model is None:
            self.train()
        targets = self.test_points()
        results: List[List[Dict[str, Any]]] = []
        try:
            if self.num_threads == 1:
                for theta in targets:
                    results.append(self.evaluate_point(theta))
            else:
                with ThreadPoolExecutor(max_workers=self.num_threads) as pool:
                    for rows in pool.map(self.evaluate_point, targets):
                        results.append(rows)
        finally:
            report = self._report(results)
            if out_path is not None:
                report.to_csv(out_path)
                logger.info(f"Wrote {len(report.rows)} benchmark rows to {out_path}")
        return report

    def _report(self, results: List[List[Dict[str, Any]]]) -> BenchmarkReport:
        columns = (["method"] + [f"theta_{j + 1}" for j in range(self.config.d)]
                   + ["dg_to_local", "rel_l2_err", "predict_ms"])
        rows = pd.DataFrame([row for group in results for row in group], columns=columns)
        return BenchmarkReport(rows=rows, beta=np.array(self.model.kernel.lengthscales),
                               fit_seconds=self.fit_seconds, rank=self.model.rank)


def run_benchmark(config: Union[BenchmarkConfig, Dict[str, Any]], out_path: Optional[str] = None,
                  num_threads: Optional[int] = None) -> BenchmarkReport:
    """Per-method, per-test-point errors and timings for the configured experiment"""
    if isinstance(config, dict):
        config = BenchmarkConfig.from_dict(config)
    return BenchmarkRunner(config, num_threads).run(out_path)
