import numpy as np
import pytest

from baseline import InterpConfig, Scheme, normalize_coordinates, select_neighbors, subspace_interpolate
from error_handler import DimensionMismatchError, InsufficientNeighborsError
from gps import fit, predict
from grassmann import StiefelBasis, riemannian_distance, sample_uniform
from kernel import KernelSpec


def cylinder_basis(theta):
    return StiefelBasis(np.array([[np.cos(theta)], [np.sin(theta)]]))


def test_neighbors_match_full_sort(rng):
    points = rng.uniform(size=(12, 2)) * np.array([1.0, 50.0])
    theta = np.array([0.4, 20.0])
    ref, order = select_neighbors(theta, points, 5)
    scaled, target = normalize_coordinates(points, theta[None, :])
    expected = np.argsort(np.linalg.norm(scaled - target, axis=1), kind="stable")[:5]
    assert list(order) == list(expected)
    assert ref == expected[0]


def test_neighbor_ties_go_to_lowest_index():
    points = np.array([[0.0], [3.0], [1.0], [4.0]])
    ref, order = select_neighbors([2.0], points, 2)
    assert list(order) == [1, 2]
    assert ref == 1


def test_lagrange_midpoint_is_geodesic_midpoint():
    points = np.array([[0.0], [1.0]])
    bases = [cylinder_basis(0.1), cylinder_basis(1.2)]
    mid = subspace_interpolate([0.5], points, bases, InterpConfig(n_r=2))
    assert riemannian_distance(mid, bases[0]) == pytest.approx(riemannian_distance(mid, bases[1]), abs=1e-8)


def test_representation_invariance(rng, rotate):
    points = np.linspace(0.0, 1.0, 4)[:, None]
    center = sample_uniform(6, 2, rng)
    bases = [StiefelBasis(np.linalg.qr(center.entries + 0.3 * rng.standard_normal((6, 2)))[0])
             for _ in range(4)]
    config = InterpConfig(n_r=3)
    first = subspace_interpolate([0.4], points, bases, config)
    second = subspace_interpolate([0.4], points, rotate(bases, seed=9), config)
    assert riemannian_distance(first, second) < 1e-8


def test_rbf_reproduces_training_subspace(rng):
    points = rng.uniform(size=(6, 2))
    bases = [sample_uniform(5, 2, rng) for _ in range(6)]
    config = InterpConfig(n_r=5, scheme=Scheme.MULTIQUADRIC_RBF)
    result = subspace_interpolate(points[2], points, bases, config)
    assert riemannian_distance(result, bases[2]) < 1e-8


def test_config_errors():
    with pytest.raises(InsufficientNeighborsError):
        InterpConfig(n_r=1)
    points = np.linspace(0.0, 1.0, 3)[:, None]
    bases = [cylinder_basis(t) for t in points[:, 0]]
    with pytest.raises(InsufficientNeighborsError):
        subspace_interpolate([0.5], points, bases, InterpConfig(n_r=4))
    with pytest.raises(DimensionMismatchError):
        subspace_interpolate([0.5, 0.5], np.zeros((3, 2)) + np.arange(3)[:, None], bases, InterpConfig(n_r=2))


def test_config_from_dict():
    config = InterpConfig.from_dict({"n_r": 4, "scheme": "rbf", "rbf_shape": 0.5})
    assert config.scheme is Scheme.MULTIQUADRIC_RBF
    assert config.n_r == 4


def test_gps_beats_interpolation_on_cylinder(cylinder):
    points, bases = cylinder
    model = fit(points, bases, KernelSpec(lengthscales=np.array([2.8])))
    grid = np.linspace(0.2 * np.pi, 1.8 * np.pi, 161)
    config = InterpConfig(n_r=3)
    gps_err = max(riemannian_distance(predict(model, [t]).mean_basis(), cylinder_basis(t)) for t in grid)
    interp_err = max(riemannian_distance(subspace_interpolate([t], points, bases, config), cylinder_basis(t))
                     for t in grid)
    assert gps_err < interp_err
