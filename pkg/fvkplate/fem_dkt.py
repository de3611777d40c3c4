"""Discrete Kirchhoff triangle: dof layouts, the discrete gradient and Hessian.

Element dofs are ordered (w, d1 w, d2 w) per vertex in triangle orientation
order. The discrete gradient maps them onto a P2 vector field through its
values at the 3 vertices and 3 edge midpoints (local edge k is opposite
vertex k). Bending integrals use the 3-point edge-midpoint rule, exact for
the quadratic integrand |grad theta - alpha I|^2.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import MeshError
from .mesh import Triangulation

log = logging.getLogger(__name__)

VALUE_SLOTS = np.array([0, 3, 6])
GRADIENT_SLOTS = np.array([[1, 2], [4, 5], [7, 8]])

# barycentric coordinates of the edge midpoints, midpoint k opposite vertex k
MIDPOINTS = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])


# ---- Dof layouts ----

@dataclass(frozen=True, eq=False)
class DktDofMap:
    """Global layout [values | gradient slots (x, y interleaved)].

    The shared layout keeps one value per node and duplicates gradient slots
    at crease nodes (second slot used by subdomain 2). The split layout also
    duplicates crease values; continuity is then imposed by coupling.
    """

    mesh: Triangulation
    split: bool
    n_values: int
    n_slots: int
    element_dofs: np.ndarray  # (nt, 9)

    @property
    def n_dofs(self) -> int:
        return self.n_values + 2 * self.n_slots

    def slot_dofs(self, slots: np.ndarray) -> np.ndarray:
        slots = np.asarray(slots, dtype=int)
        return self.n_values + 2 * slots[:, None] + np.arange(2)

    def node_value_dofs(self, nodes: np.ndarray) -> np.ndarray:
        """All value dofs of the given nodes (both copies on the crease in split layout)."""
        nodes = np.asarray(nodes, dtype=int)
        dofs = [nodes]
        if self.split:
            pos = self.mesh.crease_position()[nodes]
            dofs.append(self.mesh.n_nodes + pos[pos >= 0])
        return np.concatenate(dofs)

    def node_gradient_dofs(self, nodes: np.ndarray) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=int)
        pos = self.mesh.crease_position()[nodes]
        slots = np.concatenate([nodes, self.mesh.n_nodes + pos[pos >= 0]])
        return self.slot_dofs(slots).ravel()

    def crease_value_pairs(self) -> np.ndarray:
        """(side-1 dof, side-2 dof) per crease node; empty for the shared layout."""
        if not self.split:
            return np.empty((0, 2), dtype=int)
        nc = len(self.mesh.crease_nodes)
        return np.column_stack([self.mesh.crease_nodes, self.mesh.n_nodes + np.arange(nc)])

    def gather(self, field: "DktField") -> np.ndarray:
        values = field.values
        if self.split:
            values = np.concatenate([values, values[self.mesh.crease_nodes]])
        return np.concatenate([values, field.gradients.ravel()])

    def scatter(self, vec: np.ndarray) -> tuple["DktField", float]:
        """Back to a shared-layout field; returns the largest crease value jump."""
        n = self.mesh.n_nodes
        values = vec[:n].copy()
        jump = 0.0
        if self.split and self.mesh.has_crease:
            jump = float(np.max(np.abs(vec[n:self.n_values] - values[self.mesh.crease_nodes])))
        gradients = vec[self.n_values:].reshape(self.n_slots, 2).copy()
        return DktField(self.mesh, values, gradients), jump


@lru_cache(maxsize=64)
def dof_map(mesh: Triangulation, split: bool = False) -> DktDofMap:
    n = mesh.n_nodes
    nc = len(mesh.crease_nodes)
    tri = mesh.triangles
    pos = mesh.crease_position()[tri]
    second = (pos >= 0) & (mesh.subdomain[:, None] == 2)

    slots = np.where(second, n + pos, tri)
    values = np.where(second, n + pos, tri) if split else tri
    n_values = n + nc if split else n

    edofs = np.empty((mesh.n_triangles, 9), dtype=int)
    edofs[:, VALUE_SLOTS] = values
    edofs[:, GRADIENT_SLOTS[:, 0]] = n_values + 2 * slots
    edofs[:, GRADIENT_SLOTS[:, 1]] = n_values + 2 * slots + 1
    return DktDofMap(mesh, split, n_values, n + nc, edofs)


# ---- Fields ----

@dataclass(eq=False)
class DktField:
    mesh: Triangulation
    values: np.ndarray     # (n,)
    gradients: np.ndarray  # (n + n_crease, 2), crease slots of subdomain 2 last

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        self.gradients = np.asarray(self.gradients, dtype=float)
        n_slots = self.mesh.n_nodes + len(self.mesh.crease_nodes)
        if self.values.shape != (self.mesh.n_nodes,) or self.gradients.shape != (n_slots, 2):
            raise ValueError(
                f"DKT field needs values ({self.mesh.n_nodes},) and gradients ({n_slots}, 2)"
            )

    @classmethod
    def zeros(cls, mesh: Triangulation) -> "DktField":
        return cls(mesh, np.zeros(mesh.n_nodes),
                   np.zeros((mesh.n_nodes + len(mesh.crease_nodes), 2)))

    @property
    def slot_nodes(self) -> np.ndarray:
        return np.concatenate([np.arange(self.mesh.n_nodes), self.mesh.crease_nodes])

    def copy(self) -> "DktField":
        return DktField(self.mesh, self.values.copy(), self.gradients.copy())

    def to_vector(self) -> np.ndarray:
        return dof_map(self.mesh).gather(self)

    @classmethod
    def from_vector(cls, mesh: Triangulation, vec: np.ndarray) -> "DktField":
        return dof_map(mesh).scatter(np.asarray(vec, dtype=float))[0]

    def element_dofs(self) -> np.ndarray:
        return self.to_vector()[dof_map(self.mesh).element_dofs]

    def vertex_gradients(self) -> np.ndarray:
        """Per-triangle vertex gradients (nt, 3, 2), taken from the triangle's own side."""
        return self.element_dofs()[:, GRADIENT_SLOTS]


def dkt_interpolate(mesh: Triangulation, value, gradient) -> DktField:
    """Sample a smooth function and its gradient at the nodes (all slots exact)."""
    slot_nodes = np.concatenate([np.arange(mesh.n_nodes), mesh.crease_nodes])
    values = np.asarray(value(mesh.nodes), dtype=float).reshape(mesh.n_nodes)
    grads = np.asarray(gradient(mesh.nodes[slot_nodes]), dtype=float).reshape(len(slot_nodes), 2)
    return DktField(mesh, values, grads)


# ---- P2 basis ----

def p2_values(bary: np.ndarray) -> np.ndarray:
    """P2 Lagrange basis (q, 6): vertices 0..2, then midpoint k opposite vertex k."""
    lam = np.atleast_2d(bary)
    N = np.empty((len(lam), 6))
    for i in range(3):
        N[:, i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
        a, b = (i + 1) % 3, (i + 2) % 3
        N[:, 3 + i] = 4.0 * lam[:, a] * lam[:, b]
    return N


def p2_gradients(bary: np.ndarray, lam_grads: np.ndarray) -> np.ndarray:
    """Physical gradients of the P2 basis, shape (nt, q, 6, 2)."""
    lam = np.atleast_2d(bary)
    dN = np.empty((lam_grads.shape[0], len(lam), 6, 2))
    for i in range(3):
        dN[:, :, i] = (4.0 * lam[:, i] - 1.0)[None, :, None] * lam_grads[:, None, i]
        a, b = (i + 1) % 3, (i + 2) % 3
        dN[:, :, 3 + i] = 4.0 * (lam[:, a][None, :, None] * lam_grads[:, None, b]
                                 + lam[:, b][None, :, None] * lam_grads[:, None, a])
    return dN


def _lambda_gradients(coords: np.ndarray, areas: np.ndarray) -> np.ndarray:
    x, y = coords[..., 0], coords[..., 1]
    grads = np.empty(coords.shape)
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        grads[:, i, 0] = (y[:, j] - y[:, k]) / (2.0 * areas)
        grads[:, i, 1] = (x[:, k] - x[:, j]) / (2.0 * areas)
    return grads


# ---- Discrete gradient operator ----

@dataclass(frozen=True, eq=False)
class DktElementOperators:
    G: np.ndarray        # (nt, 12, 9): dofs -> theta at the 6 P2 nodes, row 2j + c
    H: np.ndarray        # (nt, 3, 4, 9): dofs -> grad theta at the edge midpoints, row 2c + d
    weights: np.ndarray  # (nt, 3), |T|/3 per midpoint
    lam_grads: np.ndarray


def _build_operators(coords: np.ndarray, tangents: np.ndarray) -> DktElementOperators:
    k = coords.shape[0]
    d1 = coords[:, 1] - coords[:, 0]
    d2 = coords[:, 2] - coords[:, 0]
    areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    diam = np.max(np.linalg.norm(coords - np.roll(coords, -1, axis=1), axis=2), axis=1)
    if np.any(areas < 1e-14 * diam**2):
        raise MeshError("degenerate or inverted triangle in DKT operator")

    G = np.zeros((k, 12, 9))
    for i in range(3):
        for c in range(2):
            G[:, 2 * i + c, 3 * i + 1 + c] = 1.0

    eye = np.eye(2)
    for e in range(3):
        a, b = (e + 1) % 3, (e + 2) % 3
        chord = coords[:, b] - coords[:, a]
        length = np.linalg.norm(chord, axis=1)
        t = tangents[:, e]
        sign = np.sign(np.einsum("kd,kd->k", chord, t))
        # normal part: mean of vertex gradients; tangential part: Hermite cubic slope
        avg = 0.5 * eye[None] - 0.75 * np.einsum("kc,kd->kcd", t, t)
        slope = (1.5 / length * sign)[:, None] * t
        rows = slice(2 * (3 + e), 2 * (3 + e) + 2)
        G[:, rows, 3 * a + 1:3 * a + 3] = avg
        G[:, rows, 3 * b + 1:3 * b + 3] = avg
        G[:, rows, 3 * a] = -slope
        G[:, rows, 3 * b] = slope

    lam_grads = _lambda_gradients(coords, areas)
    dN = p2_gradients(MIDPOINTS, lam_grads)           # (k, 3, 6, 2)
    G6 = G.reshape(k, 6, 2, 9)
    H = np.einsum("kqjd,kjcx->kqcdx", dN, G6).reshape(k, 3, 4, 9)
    weights = np.repeat(areas[:, None] / 3.0, 3, axis=1)
    return DktElementOperators(G, H, weights, lam_grads)


def _element_tangents(mesh: Triangulation) -> np.ndarray:
    return mesh.tangents[mesh.triangle_edges]


@lru_cache(maxsize=32)
def element_operators(mesh: Triangulation) -> DktElementOperators:
    return _build_operators(mesh.nodes[mesh.triangles], _element_tangents(mesh))


def build_discrete_gradient(mesh: Triangulation, t_index: int) -> DktElementOperators:
    """Operators of a single triangle, built from its coordinates and edge frames."""
    coords = mesh.nodes[mesh.triangles[t_index]][None]
    tangents = mesh.tangents[mesh.triangle_edges[t_index]][None]
    return _build_operators(coords, tangents)


@lru_cache(maxsize=32)
def bending_element_matrices(mesh: Triangulation) -> tuple[np.ndarray, np.ndarray]:
    """K_T = sum_q beta_q H_q^T H_q and the trace load l_T = sum_q beta_q tr(H_q)."""
    ops = element_operators(mesh)
    K = np.einsum("tq,tqrx,tqry->txy", ops.weights, ops.H, ops.H)
    trace = ops.H[:, :, 0, :] + ops.H[:, :, 3, :]
    load = np.einsum("tq,tqx->tx", ops.weights, trace)
    return K, load


def discrete_gradient_nodes(field: DktField) -> np.ndarray:
    """theta_h at the 6 P2 nodes, shape (nt, 6, 2)."""
    ops = element_operators(field.mesh)
    theta = np.einsum("trx,tx->tr", ops.G, field.element_dofs())
    return theta.reshape(-1, 6, 2)


def discrete_gradient_at(field: DktField, bary: np.ndarray) -> np.ndarray:
    """theta_h at barycentric points (q, 3), shape (nt, q, 2)."""
    return np.einsum("qj,tjc->tqc", p2_values(bary), discrete_gradient_nodes(field))


def discrete_hessian_at(field: DktField, bary: np.ndarray) -> np.ndarray:
    """grad theta_h at barycentric points, shape (nt, q, 2, 2), [c, d] = d_d theta_c."""
    ops = element_operators(field.mesh)
    dN = p2_gradients(bary, ops.lam_grads)
    return np.einsum("tqjd,tjc->tqcd", dN, discrete_gradient_nodes(field))


def discrete_hessian(field: DktField) -> np.ndarray:
    """grad grad_h w at the three edge midpoints, shape (nt, 3, 2, 2); linear per triangle."""
    ops = element_operators(field.mesh)
    return np.einsum("tqrx,tx->tqr", ops.H, field.element_dofs()).reshape(-1, 3, 2, 2)


# ---- Reduced cubic ----

EXPONENTS = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3))


def _monomials(xi: np.ndarray, eta: np.ndarray, scale: np.ndarray):
    """Scaled monomials and their x-derivatives up to second order."""
    def pw(base, p):
        return base ** p if p > 0 else np.ones_like(base)

    V, Dx, Dy, Dxx, Dxy, Dyy = ([] for _ in range(6))
    s = scale
    for p, q in EXPONENTS:
        V.append(pw(xi, p) * pw(eta, q))
        Dx.append(p * pw(xi, p - 1) * pw(eta, q) / s if p else np.zeros_like(xi))
        Dy.append(q * pw(xi, p) * pw(eta, q - 1) / s if q else np.zeros_like(xi))
        Dxx.append(p * (p - 1) * pw(xi, p - 2) * pw(eta, q) / s**2 if p > 1 else np.zeros_like(xi))
        Dxy.append(p * q * pw(xi, p - 1) * pw(eta, q - 1) / s**2 if p and q else np.zeros_like(xi))
        Dyy.append(q * (q - 1) * pw(xi, p) * pw(eta, q - 2) / s**2 if q > 1 else np.zeros_like(xi))
    return tuple(np.stack(m, axis=-1) for m in (V, Dx, Dy, Dxx, Dxy, Dyy))


@dataclass(frozen=True, eq=False)
class ReducedCubic:
    """Explicit P3_red representation of a DKT field on every triangle."""

    mesh: Triangulation
    coefficients: np.ndarray  # (nt, 10)
    centers: np.ndarray       # (nt, 2)
    scales: np.ndarray        # (nt,)

    def evaluate(self, bary: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Values (nt, q), gradients (nt, q, 2) and Hessians (nt, q, 2, 2)."""
        pts = np.einsum("qi,tid->tqd", np.atleast_2d(bary), self.mesh.nodes[self.mesh.triangles])
        s = self.scales[:, None]
        xi = (pts[..., 0] - self.centers[:, None, 0]) / s
        eta = (pts[..., 1] - self.centers[:, None, 1]) / s
        V, Dx, Dy, Dxx, Dxy, Dyy = _monomials(xi, eta, s)
        c = self.coefficients[:, None, :]
        values = np.sum(V * c, axis=-1)
        grads = np.stack([np.sum(Dx * c, axis=-1), np.sum(Dy * c, axis=-1)], axis=-1)
        hxx, hxy, hyy = (np.sum(D * c, axis=-1) for D in (Dxx, Dxy, Dyy))
        hess = np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)
        return values, grads, hess


def reduced_cubic(field: DktField) -> ReducedCubic:
    mesh = field.mesh
    coords = mesh.nodes[mesh.triangles]
    centers = coords.mean(axis=1)
    scales = np.max(np.linalg.norm(coords - np.roll(coords, -1, axis=1), axis=2), axis=1)
    s = scales[:, None]
    xi = (coords[..., 0] - centers[:, None, 0]) / s
    eta = (coords[..., 1] - centers[:, None, 1]) / s
    V, Dx, Dy, _, _, _ = _monomials(xi, eta, s)   # (nt, 3, 10)

    nt = mesh.n_triangles
    A = np.empty((nt, 10, 10))
    A[:, VALUE_SLOTS] = V
    A[:, GRADIENT_SLOTS[:, 0]] = Dx
    A[:, GRADIENT_SLOTS[:, 1]] = Dy
    offset = centers[:, None, :] - coords                       # x_T - z
    taylor = V + Dx * offset[..., 0:1] + Dy * offset[..., 1:2]
    at_center = np.zeros((nt, 10))
    at_center[:, 0] = 1.0
    A[:, 9] = at_center - taylor.mean(axis=1)

    rhs = np.zeros((nt, 10))
    rhs[:, :9] = field.element_dofs()
    coefficients = np.linalg.solve(A, rhs[..., None])[..., 0]
    return ReducedCubic(mesh, coefficients, centers, scales)
