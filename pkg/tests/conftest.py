import numpy as np
import pytest

from fvkplate.fem_dkt import DktField, dof_map
from fvkplate.fem_p1 import P1VectorField
from fvkplate.mesh import build_triangulation, make_disc_mesh, make_square_mesh, straight_crease


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def square_mesh():
    return make_square_mesh(1.0, 0.5)


@pytest.fixture(scope="session")
def disc_mesh():
    return make_disc_mesh(1.0, 0.35)


@pytest.fixture(scope="session")
def crease_mesh():
    return make_square_mesh(1.0, 0.5, straight_crease(0.0))


@pytest.fixture(scope="session")
def reference_triangle():
    return build_triangulation(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), [[0, 1, 2]])


def random_dkt(mesh, rng, scale=0.1):
    n_slots = mesh.n_nodes + len(mesh.crease_nodes)
    return DktField(mesh, scale * rng.standard_normal(mesh.n_nodes),
                    scale * rng.standard_normal((n_slots, 2)))


def random_p1(mesh, rng, scale=0.1):
    return P1VectorField(mesh, scale * rng.standard_normal((mesh.n_nodes, 2)))


def random_layout_vector(mesh, rng, split=False, scale=0.1):
    return scale * rng.standard_normal(dof_map(mesh, split).n_dofs)
