import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from error_handler import BadDimensionError, ConfigError, ShapeMismatchError, ZeroNormError
from gps import fit, predict
from grassmann import StiefelBasis, sample_uniform
from kernel import KernelSpec
from prom import (
    BenchmarkConfig,
    GlobalProjection,
    LtiSystem,
    SnapshotSet,
    build_test_system,
    galerkin_reduce,
    pod_basis,
    relative_l2_state_error,
    run_benchmark,
    simulate,
    training_design,
)


class TestSystem:
    @pytest.mark.parametrize("theta", [[0.0], [0.5], [1.0], [0.5, 0.5, 0.5], [0.0, 1.0, 1.0]])
    def test_stable(self, theta):
        system = build_test_system(50, theta)
        e = system.e_matrix().toarray()
        a = system.a_matrix().toarray()
        eig = np.linalg.eigvals(np.linalg.solve(e, a))
        assert np.all(eig.real < 0)

    def test_pure_diffusion_without_fluid_fraction(self):
        system = build_test_system(30, [0.0, 0.4, 0.9])
        a = system.a_matrix().toarray()
        assert_allclose(a, a.T, atol=1e-9)

    def test_convection_breaks_symmetry(self):
        a = build_test_system(30, [0.5]).a_matrix().toarray()
        assert np.max(np.abs(a - a.T)) > 1.0

    def test_ports(self):
        system = build_test_system(40, [0.3])
        assert (system.n, system.p, system.q) == (40, 1, 1)
        assert system.b[10, 0] == 1.0
        assert system.c[0, 20] == 1.0 and system.c[0, 30] == -1.0

    @pytest.mark.parametrize("n, theta", [(20, [0.1, 0.2]), (5, [0.1])])
    def test_bad_dimension(self, n, theta):
        with pytest.raises(BadDimensionError):
            build_test_system(n, theta)

    def test_affine_evaluation_follows_theta(self):
        system = build_test_system(20, [0.0])
        assert_allclose(system.at([1.0]).a_matrix().toarray(), build_test_system(20, [1.0]).a_matrix().toarray())


class TestSimulation:
    def test_first_order_convergence(self):
        system = build_test_system(20, [0.5])
        reference = simulate(system, 1.0, 0.5, 12800).states[:, -1]
        errors = [np.max(np.abs(simulate(system, 1.0, 0.5, j).states[:, -1] - reference)) for j in (100, 200)]
        assert 1.6 < errors[0] / errors[1] < 2.4

    def test_reduced_model_with_full_basis_reproduces_full_model(self):
        system = build_test_system(15, [0.7])
        full = simulate(system, 1.0, 1.0, 40)
        rom = galerkin_reduce(system, StiefelBasis(np.eye(15)))
        reduced = simulate(rom, 1.0, 1.0, 40)
        assert_allclose(reduced.states, full.states, atol=1e-12)
        assert relative_l2_state_error(full, reduced.states, rom.basis) < 1e-12

    def test_callable_input(self):
        system = LtiSystem.from_matrices(np.eye(2), -np.eye(2), [[1.0], [0.0]], [[1.0, 0.0]])
        out = simulate(system, lambda t: 0.0, 1.0, 10)
        assert np.all(out.states == 0.0)

    def test_pod_tail_energy(self):
        system = build_test_system(30, [0.4])
        snaps = simulate(system, lambda t: np.sin(8 * t), 1.0, 60)
        basis = pod_basis(snaps, 4)
        s = np.linalg.svd(snaps.states, compute_uv=False)
        residual = snaps.states - basis.entries @ (basis.entries.T @ snaps.states)
        assert np.sum(residual ** 2) == pytest.approx(np.sum(s[4:] ** 2), rel=1e-10)

    def test_pod_beats_random_bases(self, rng):
        snaps = simulate(build_test_system(30, [0.7]), lambda t: np.cos(5 * t), 1.0, 60)

        def residual(basis):
            v = basis.entries
            return np.linalg.norm(snaps.states - v @ (v.T @ snaps.states))

        best = residual(pod_basis(snaps, 3))
        assert all(best <= residual(sample_uniform(30, 3, rng)) for _ in range(100))

    def test_relative_error_direct_sum(self, rng):
        times = np.linspace(0.1, 1.0, 10)
        states = rng.standard_normal((6, 10))
        basis = sample_uniform(6, 2, rng)
        rom_states = rng.standard_normal((2, 10))
        dt = np.diff(np.concatenate([[0.0], times]))
        num = sum(dt[i] * np.sum((states[:, i] - basis.entries @ rom_states[:, i]) ** 2) for i in range(10))
        den = sum(dt[i] * np.sum(states[:, i] ** 2) for i in range(10))
        value = relative_l2_state_error(SnapshotSet(states, times), rom_states, basis)
        assert value == pytest.approx(np.sqrt(num / den), rel=1e-12)

    def test_relative_error_rejects_zero_trajectory(self, rng):
        snaps = SnapshotSet(np.zeros((4, 3)), np.array([0.1, 0.2, 0.3]))
        with pytest.raises(ZeroNormError):
            relative_l2_state_error(snaps, np.zeros((1, 3)), sample_uniform(4, 1, rng))
        with pytest.raises(ShapeMismatchError):
            relative_l2_state_error(snaps, np.zeros((2, 3)), sample_uniform(4, 1, rng))


class TestDesigns:
    def test_equispaced(self):
        assert_allclose(training_design("equispaced", 5, 1)[:, 0], np.linspace(0, 1, 5))
        assert training_design("equispaced", 9, 2).shape == (9, 2)
        with pytest.raises(ConfigError):
            training_design("equispaced", 7, 2)

    def test_latin_hypercube_is_seeded_and_stratified(self):
        first = training_design("lhs", 8, 3, seed=4)
        assert_allclose(first, training_design("lhs", 8, 3, seed=4))
        for j in range(3):
            assert sorted(np.floor(first[:, j] * 8).astype(int)) == list(range(8))

    def test_unknown_design(self):
        with pytest.raises(ConfigError):
            training_design("sobol", 4, 1)


def test_global_projection_matches_galerkin(rng):
    system = build_test_system(30, [0.0, 0.0, 0.0])
    points = training_design("lhs", 5, 3, seed=1)
    bases = [pod_basis(simulate(system.at(p), 1.0, 1.0, 40), 3) for p in points]
    model = fit(points, bases, KernelSpec(lengthscales=np.full(3, 0.5)))
    projection = GlobalProjection(system, model)
    theta = np.array([0.4, 0.6, 0.2])
    rom = projection.rom(predict(model, theta), theta)
    direct = galerkin_reduce(system, rom.basis, theta)
    assert_allclose(rom.e_r, direct.e_r, atol=1e-10)
    assert_allclose(rom.a_r, direct.a_r, atol=1e-8)
    assert_allclose(rom.b_r, direct.b_r, atol=1e-12)
    assert_allclose(rom.c_r, direct.c_r, atol=1e-12)


class TestBenchmark:
    def test_config_parsing(self):
        config = BenchmarkConfig.from_dict({
            "system": {"n": 60, "d": 3}, "k": 4,
            "train": {"design": "lhs", "l": 6, "seed": 2},
            "test": {"count": 3, "seed": 5},
            "methods": ["gps", "interp"], "tuning": "rule",
        })
        assert (config.n, config.d, config.k, config.l) == (60, 3, 4, 6)
        assert config.methods == ("gps", "interp")
        assert config.interp_config().n_r == 6

    @pytest.mark.parametrize("payload", [
        {"methods": ["gps", "irka"]},
        {"tuning": "ml"},
        {"system": {"n": "many"}},
    ])
    def test_config_errors(self, payload):
        with pytest.raises(ConfigError):
            BenchmarkConfig.from_dict(payload)

    def test_small_run_writes_report(self, tmp_path):
        config = {
            "system": {"n": 40, "d": 1}, "k": 3,
            "train": {"design": "equispaced", "l": 5},
            "test": {"count": 3, "seed": 7},
            "snapshots": {"T": 1.0, "J": 40},
        }
        out = tmp_path / "report.csv"
        report = run_benchmark(config, str(out), num_threads=2)
        text = out.read_text().splitlines()
        assert text[0] == "method,theta_1,dg_to_local,rel_l2_err,predict_ms"
        assert len(report.rows) == 9
        assert report.rows["rel_l2_err"].notna().all()
        local = report.rows[report.rows["method"] == "local_pod"]
        assert (local["dg_to_local"] < 1e-8).all()

    SMALL = {
        "system": {"n": 40, "d": 1}, "k": 3,
        "train": {"design": "equispaced", "l": 5},
        "test": {"count": 4, "seed": 7},
        "snapshots": {"T": 1.0, "J": 40},
    }

    def test_thread_count_does_not_change_rows(self):
        serial = run_benchmark(self.SMALL, num_threads=1).rows.drop(columns="predict_ms")
        threaded = run_benchmark(self.SMALL, num_threads=3).rows.drop(columns="predict_ms")
        pd.testing.assert_frame_equal(serial, threaded, check_exact=False, rtol=1e-12)

    def test_training_points_reproduce_local_pod(self):
        config = dict(self.SMALL, test={"points": training_design("equispaced", 5, 1).tolist()})
        rows = run_benchmark(config).rows
        gps = rows[rows["method"] == "gps"].reset_index(drop=True)
        local = rows[rows["method"] == "local_pod"].reset_index(drop=True)
        assert len(gps) == 5
        assert (gps["dg_to_local"] < 1e-8).all()
        assert_allclose(gps["rel_l2_err"], local["rel_l2_err"], rtol=1e-6)

    @pytest.mark.slow
    def test_gps_not_worse_than_interpolation(self):
        config = {
            "system": {"n": 400, "d": 1}, "k": 10,
            "train": {"design": "equispaced", "l": 7},
            "test": {"count": 50, "seed": 1},
        }
        rows = run_benchmark(config).rows
        means = rows.groupby("method")["rel_l2_err"].mean()
        assert rows["rel_l2_err"].notna().all()
        assert means["gps"] <= means["interp"]
        assert means["gps"] <= 10.0 * means["local_pod"]
