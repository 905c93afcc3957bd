"""Shared fixtures: coarse meshes and a small porous training set."""

import numpy as np
import pytest

from rbhomog.mesh import MeshSpec, build_mesh
from rbhomog.micro_fem import NewtonOptions
from rbhomog.sampling import MaterialLayout, ParameterSpace
from rbhomog.snapshots import generate_snapshots
from rbhomog.tensor_mech import MaterialParams

MATRIX = MaterialParams(1.0, 1.0)
FIBER = MaterialParams(10.0, 10.0)


@pytest.fixture(scope="session")
def square_mesh():
    return build_mesh(MeshSpec("unit_square", element="quad4", divisions=4))


@pytest.fixture(scope="session")
def fiber_mesh():
    """Coarse two-phase fiber cell with bilinear elements."""
    return build_mesh(MeshSpec("fiber", element="quad4", divisions=4, layers=(2, 3)))


@pytest.fixture(scope="session")
def fiber_mesh_quad8():
    return build_mesh(MeshSpec("fiber", element="quad8", divisions=3, layers=(1, 2)))


@pytest.fixture(scope="session")
def porous_mesh():
    return build_mesh(MeshSpec("porous", element="quad4", divisions=3, layers=(3,)))


@pytest.fixture
def homogeneous():
    return {0: MATRIX, 1: MATRIX}


@pytest.fixture
def two_phase():
    return {0: MATRIX, 1: FIBER}


@pytest.fixture(scope="session")
def porous_space():
    return ParameterSpace(((-0.05, 0.05),) * 3, MaterialLayout({0: MATRIX}))


@pytest.fixture(scope="session")
def porous_snapshots(porous_mesh, porous_space):
    """24 Sobol snapshots of the coarse porous cell under linear BCs."""
    points = porous_space.sobol(24)
    return generate_snapshots(
        points, porous_mesh, "linear", porous_space.material, NewtonOptions()
    )


@pytest.fixture(scope="session")
def porous_test_snapshots(porous_mesh, porous_space):
    points = porous_space.uniform(10, seed=7)
    return generate_snapshots(
        points, porous_mesh, "linear", porous_space.material, NewtonOptions()
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
