"""P1 spaces, elementwise nodal interpolation and the vertex-rule inner product."""

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix

from .mesh import Triangulation

log = logging.getLogger(__name__)


@dataclass(eq=False)
class P1VectorField:
    mesh: Triangulation
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_nodes, 2):
            raise ValueError(
                f"P1 field needs shape ({self.mesh.n_nodes}, 2), got {self.values.shape}"
            )

    @classmethod
    def zeros(cls, mesh: Triangulation) -> "P1VectorField":
        return cls(mesh, np.zeros((mesh.n_nodes, 2)))

    @classmethod
    def interpolate(cls, mesh: Triangulation, fn) -> "P1VectorField":
        return cls(mesh, np.asarray(fn(mesh.nodes), dtype=float).reshape(mesh.n_nodes, 2))

    def copy(self) -> "P1VectorField":
        return P1VectorField(self.mesh, self.values.copy())

    def to_vector(self) -> np.ndarray:
        return self.values.ravel().copy()

    @classmethod
    def from_vector(cls, mesh: Triangulation, vec: np.ndarray) -> "P1VectorField":
        return cls(mesh, np.asarray(vec, dtype=float).reshape(mesh.n_nodes, 2))


@dataclass(frozen=True, eq=False)
class VertexQuadrature:
    weights: np.ndarray  # (nt, 3), beta_z^T = |T|/3

    @property
    def total(self) -> float:
        return float(self.weights.sum())


@lru_cache(maxsize=32)
def vertex_quadrature(mesh: Triangulation) -> VertexQuadrature:
    return VertexQuadrature(np.repeat(mesh.areas[:, None] / 3.0, 3, axis=1))


@lru_cache(maxsize=32)
def barycentric_gradients(mesh: Triangulation) -> np.ndarray:
    """Constant gradients of the barycentric coordinates, shape (nt, 3, 2)."""
    p = mesh.nodes[mesh.triangles]
    x, y = p[..., 0], p[..., 1]
    two_area = 2.0 * mesh.areas
    grads = np.empty((mesh.n_triangles, 3, 2))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        grads[:, i, 0] = (y[:, j] - y[:, k]) / two_area
        grads[:, i, 1] = (x[:, k] - x[:, j]) / two_area
    return grads


def p1_gradients(u: P1VectorField) -> np.ndarray:
    """Elementwise gradients, G[t, c, d] = d u_c / d x_d."""
    grads = barycentric_gradients(u.mesh)
    return np.einsum("tic,tid->tcd", u.values[u.mesh.triangles], grads)


def p1_gradient(u: P1VectorField, t_index: int) -> np.ndarray:
    grads = barycentric_gradients(u.mesh)[t_index]
    return u.values[u.mesh.triangles[t_index]].T @ grads


def symmetric_strain(grad: np.ndarray) -> np.ndarray:
    """eps~(u) = grad u + grad u^T (no factor 1/2)."""
    return grad + np.swapaxes(grad, -1, -2)


def at_vertices(mesh: Triangulation, nodal: np.ndarray) -> np.ndarray:
    """Elementwise nodal interpolation: per-triangle vertex samples."""
    return np.asarray(nodal)[mesh.triangles]


def interpolated_inner_product(mesh: Triangulation, v: np.ndarray, w: np.ndarray) -> float:
    """(v, w)_h = sum_T sum_z beta_z^T v|_T(z) . w|_T(z).

    `v` and `w` are either nodal arrays (n, ...) or per-triangle vertex arrays
    (nt, 3, ...); the latter may jump across edges.
    """
    v = _per_vertex(mesh, v)
    w = _per_vertex(mesh, w)
    beta = vertex_quadrature(mesh).weights
    prod = (v * w).reshape(mesh.n_triangles, 3, -1).sum(axis=2)
    return float(np.sum(beta * prod))


def _per_vertex(mesh: Triangulation, field: np.ndarray) -> np.ndarray:
    field = np.asarray(field, dtype=float)
    if field.ndim == 0:
        return np.full((mesh.n_triangles, 3), float(field))
    if field.shape[:2] == (mesh.n_triangles, 3) and field.shape[0] != mesh.n_nodes:
        return field
    if field.shape[0] == mesh.n_nodes:
        return field[mesh.triangles]
    if field.shape[:2] == (mesh.n_triangles, 3):
        return field
    raise ValueError(f"cannot evaluate field of shape {field.shape} at triangle vertices")


def lumped_mass(mesh: Triangulation) -> np.ndarray:
    """Nodal weights sum_{T ni z} beta_z^T."""
    beta = vertex_quadrature(mesh).weights
    return np.bincount(mesh.triangles.ravel(), weights=beta.ravel(), minlength=mesh.n_nodes)


# ---- Vector P1 assembly ----

@lru_cache(maxsize=32)
def strain_basis(mesh: Triangulation) -> np.ndarray:
    """eps~ of the local vector hats lambda_i e_c, shape (nt, 6, 2, 2), local dof 2i + c."""
    grads = barycentric_gradients(mesh)
    basis = np.zeros((mesh.n_triangles, 6, 2, 2))
    for i in range(3):
        for c in range(2):
            basis[:, 2 * i + c, c, :] = grads[:, i, :]
    return symmetric_strain(basis)


def vector_dofs(mesh: Triangulation) -> np.ndarray:
    """Global dofs of the local vector hats, shape (nt, 6)."""
    tri = mesh.triangles
    return np.stack([2 * tri + c for c in range(2)], axis=2).reshape(-1, 6)


def assemble_matrix(element: np.ndarray, dofs: np.ndarray, size: int) -> csr_matrix:
    rows = np.repeat(dofs, dofs.shape[1], axis=1).ravel()
    cols = np.tile(dofs, (1, dofs.shape[1])).ravel()
    return coo_matrix((element.ravel(), (rows, cols)), shape=(size, size)).tocsr()


def assemble_vector(element: np.ndarray, dofs: np.ndarray, size: int) -> np.ndarray:
    return np.bincount(dofs.ravel(), weights=element.ravel(), minlength=size)


@lru_cache(maxsize=32)
def strain_matrix(mesh: Triangulation) -> csr_matrix:
    """A[z, y] = (eps~(phi_y), eps~(phi_z)) over the vector P1 space."""
    basis = strain_basis(mesh)
    local = np.einsum("t,taij,tbij->tab", mesh.areas, basis, basis)
    return assemble_matrix(local, vector_dofs(mesh), 2 * mesh.n_nodes)


@lru_cache(maxsize=32)
def vector_lumped_mass(mesh: Triangulation) -> np.ndarray:
    return np.repeat(lumped_mass(mesh), 2)


# ---- Reference quadrature ----

def collapsed_gauss_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss-Legendre rule on the reference triangle.

    Returns barycentric points (q, 3) and weights (q,) summing to 1, exact for
    polynomials of degree 2*order - 2.
    """
    x, wx = np.polynomial.legendre.leggauss(order)
    a = 0.5 * (x + 1.0)
    wa = 0.5 * wx
    A, B = np.meshgrid(a, a, indexing="ij")
    WA, WB = np.meshgrid(wa, wa, indexing="ij")
    s = A.ravel()
    t = (1.0 - A.ravel()) * B.ravel()
    weights = 2.0 * (WA * WB).ravel() * (1.0 - A.ravel())
    bary = np.column_stack([1.0 - s - t, s, t])
    return bary, weights


def quadrature_points(mesh: Triangulation, bary: np.ndarray) -> np.ndarray:
    """Physical points (nt, q, 2) for barycentric points (q, 3)."""
    return np.einsum("qi,tid->tqd", bary, mesh.nodes[mesh.triangles])


def integrate(mesh: Triangulation, values: np.ndarray, weights: np.ndarray) -> float:
    """sum_T |T| sum_q w_q values[T, q] for values of shape (nt, q)."""
    return float(np.sum(mesh.areas[:, None] * weights[None, :] * values))
