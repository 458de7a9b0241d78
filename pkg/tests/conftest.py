import numpy as np
import pytest
from scipy.stats import ortho_group

from grassmann import StiefelBasis, sample_uniform
from kernel import KernelSpec


def cylinder_points(count: int = 7) -> np.ndarray:
    return (np.pi * np.linspace(0.2, 1.8, count))[:, None]


def cylinder_basis(theta: float) -> StiefelBasis:
    return StiefelBasis(np.array([[np.cos(theta)], [np.sin(theta)]]))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def cylinder():
    """Seven lines span(cos theta, sin theta) in R^2 at theta = c pi, c equispaced in [0.2, 1.8]"""
    points = cylinder_points()
    bases = [cylinder_basis(t) for t in points[:, 0]]
    return points, bases


@pytest.fixture
def random_instance():
    """Factory for random training data: (points, bases, kernel)"""

    def make(n=10, k=2, l=5, d=1, beta=0.3, seed=0, shared=False):
        gen = np.random.default_rng(seed)
        points = gen.uniform(size=(l, d))
        bases = [sample_uniform(n, k, gen) for _ in range(l)]
        lengthscales = np.full(1 if shared else d, beta, dtype=float)
        return points, bases, KernelSpec(lengthscales=lengthscales, shared=shared)

    return make


@pytest.fixture
def rotate():
    """Replace each basis by another representative X Q of the same subspace"""

    def apply(bases, seed=0):
        gen = np.random.default_rng(seed)
        out = []
        for b in bases:
            q = ortho_group.rvs(b.k, random_state=gen) if b.k > 1 else np.array([[-1.0]])
            out.append(b.rotated(q))
        return out

    return apply
