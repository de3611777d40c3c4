"""Discrete bilayer energy, the w-step merit function and its derivatives, the u-step system.

Bending uses the exact edge-midpoint rule on grad grad_h w; membrane and load
terms use the vertex rule with the DKT gradient dofs read directly at vertices.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import csr_matrix, diags
from scipy.sparse.linalg import splu

from .errors import AssemblyError
from .fem_dkt import (
    GRADIENT_SLOTS,
    VALUE_SLOTS,
    DktDofMap,
    DktField,
    bending_element_matrices,
    discrete_hessian,
    dof_map,
    element_operators,
)
from .fem_p1 import (
    P1VectorField,
    assemble_matrix,
    assemble_vector,
    p1_gradients,
    strain_basis,
    strain_matrix,
    symmetric_strain,
    vector_dofs,
    vector_lumped_mass,
    vertex_quadrature,
)
from .mesh import Triangulation

log = logging.getLogger(__name__)

W_BOUNDARY_KINDS = ("none", "clamped", "simple")
FLAT_IDENTITY = np.array([1.0, 0.0, 0.0, 1.0])


# ---- Problem description ----

@dataclass(frozen=True, eq=False)
class ProblemSpec:
    mesh: Triangulation
    theta: float = 1.0
    alpha: tuple[float, float] = (1.0, 1.0)
    force: np.ndarray | None = None            # nodal load density
    w_boundary: str = "none"
    w_nodes: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    w_data: DktField | None = None             # values/gradients imposed on w_nodes
    u_nodes: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    u_data: np.ndarray | None = None           # (n, 2) in-plane boundary values
    l2_vertical: bool = False
    l2_horizontal: bool = False
    pinned_node: int | None = None

    def __post_init__(self) -> None:
        if self.theta < 0:
            raise ValueError(f"theta must be non-negative, got {self.theta}")
        if self.w_boundary not in W_BOUNDARY_KINDS:
            raise ValueError(f"unknown w boundary condition {self.w_boundary!r}")
        object.__setattr__(self, "w_nodes", np.asarray(self.w_nodes, dtype=int))
        object.__setattr__(self, "u_nodes", np.asarray(self.u_nodes, dtype=int))
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        boundary = self.mesh.boundary_mask()
        for name in ("w_nodes", "u_nodes"):
            nodes = getattr(self, name)
            if len(nodes) and not boundary[nodes].all():
                raise ValueError(f"{name} must be boundary nodes")
        if self.w_boundary == "none" and len(self.w_nodes):
            raise ValueError("w_nodes given without a boundary condition kind")
        if self.pinned_node is not None and not 0 <= self.pinned_node < self.mesh.n_nodes:
            raise ValueError(f"pinned node {self.pinned_node} is not in the mesh")
        if self.force is not None:
            force = np.asarray(self.force, dtype=float)
            if force.shape != (self.mesh.n_nodes,):
                raise ValueError("force must be a nodal field")
            object.__setattr__(self, "force", force)

    def element_alpha(self) -> np.ndarray:
        return np.where(self.mesh.subdomain == 2, self.alpha[1], self.alpha[0])

    def nodal_force(self, scale: float = 1.0) -> np.ndarray:
        if self.force is None:
            return np.zeros(self.mesh.n_nodes)
        return scale * self.force

    def with_parameter(self, name: str, value: float) -> "ProblemSpec":
        if name == "theta":
            return replace(self, theta=float(value))
        if name == "alpha":
            return replace(self, alpha=(float(value), float(value)))
        if name == "alpha1":
            return replace(self, alpha=(float(value), self.alpha[1]))
        if name == "alpha2":
            return replace(self, alpha=(self.alpha[0], float(value)))
        raise ValueError(f"cannot sweep parameter {name!r}")


def auto_metric(mesh: Triangulation, w_nodes: np.ndarray, u_nodes: np.ndarray) -> tuple[bool, bool]:
    """L2 augmentation switches (vertical, horizontal) that remove rigid null modes."""
    horizontal = len(u_nodes) == 0
    if len(w_nodes) == 0:
        return True, horizontal
    supported = np.zeros(mesh.n_nodes, dtype=bool)
    supported[w_nodes] = True
    supported[mesh.crease_nodes] = False
    for tag in np.unique(mesh.subdomain):
        nodes = np.unique(mesh.triangles[mesh.subdomain == tag])
        if not supported[nodes].any():
            return True, horizontal
    return False, horizontal


@dataclass(frozen=True)
class EnergyBreakdown:
    bending: float
    membrane: float
    force: float

    @property
    def total(self) -> float:
        return self.bending + self.membrane - self.force

    @property
    def elastic(self) -> float:
        return self.bending + self.membrane


@dataclass(frozen=True)
class Diagnostics:
    mean_curv_1: float
    mean_curv_2: float
    q_sym: float | None


# ---- Energy ----

def _membrane_strain(u: P1VectorField) -> np.ndarray:
    return symmetric_strain(p1_gradients(u))


def assemble_energy(u: P1VectorField, w: DktField, spec: ProblemSpec,
                    force_scale: float = 1.0) -> EnergyBreakdown:
    mesh = spec.mesh
    ops = element_operators(mesh)
    X = w.element_dofs()

    hess = np.einsum("tqrx,tx->tqr", ops.H, X)
    dev = hess - spec.element_alpha()[:, None, None] * FLAT_IDENTITY
    bending = 0.5 * float(np.sum(ops.weights * np.sum(dev**2, axis=2)))

    beta = vertex_quadrature(mesh).weights
    g = X[:, GRADIENT_SLOTS]
    phi = np.einsum("tic,tid->ticd", g, g) + _membrane_strain(u)[:, None]
    membrane = 0.5 * spec.theta * float(np.sum(beta * np.sum(phi**2, axis=(2, 3))))

    f = spec.nodal_force(force_scale)[mesh.triangles]
    load = float(np.sum(beta * f * X[:, VALUE_SLOTS]))
    return EnergyBreakdown(bending, membrane, load)


# ---- Constraints on w ----

def w_dirichlet(spec: ProblemSpec, dmap: DktDofMap) -> tuple[np.ndarray, np.ndarray]:
    """Dirichlet dofs of w and their values in the given layout."""
    if spec.w_boundary == "none" or len(spec.w_nodes) == 0:
        return np.empty(0, dtype=int), np.empty(0)
    data = spec.w_data if spec.w_data is not None else DktField.zeros(spec.mesh)
    target = dmap.gather(data)
    dofs = dmap.node_value_dofs(spec.w_nodes)
    if spec.w_boundary == "clamped":
        dofs = np.concatenate([dofs, dmap.node_gradient_dofs(spec.w_nodes)])
    dofs = np.unique(dofs)
    return dofs, target[dofs]


def w_pinned(spec: ProblemSpec, dmap: DktDofMap) -> np.ndarray:
    if spec.pinned_node is None:
        return np.empty(0, dtype=int)
    return dmap.node_value_dofs([spec.pinned_node])


def free_w_dofs(spec: ProblemSpec, dmap: DktDofMap) -> np.ndarray:
    mask = np.ones(dmap.n_dofs, dtype=bool)
    mask[w_dirichlet(spec, dmap)[0]] = False
    mask[w_pinned(spec, dmap)] = False
    return np.flatnonzero(mask)


# ---- w-step ----

def _value_mass(spec: ProblemSpec, dmap: DktDofMap) -> np.ndarray:
    beta = vertex_quadrature(spec.mesh).weights
    return np.bincount(dmap.element_dofs[:, VALUE_SLOTS].ravel(), weights=beta.ravel(),
                       minlength=dmap.n_dofs)


def assemble_w_step(u_prev: P1VectorField, x: np.ndarray, x_prev: np.ndarray, tau: float,
                    spec: ProblemSpec, dmap: DktDofMap, force_scale: float = 1.0,
                    jacobian: bool = True) -> tuple[np.ndarray, csr_matrix | None]:
    """Gradient and Hessian of the w-step merit function in the layout of `dmap`."""
    mesh = spec.mesh
    K_e, l_e = bending_element_matrices(mesh)
    edofs = dmap.element_dofs
    X, Xp = x[edofs], x_prev[edofs]
    alpha = spec.element_alpha()

    r_e = (np.einsum("txy,ty->tx", K_e, (1.0 + tau) * X - Xp)
           - tau * alpha[:, None] * l_e)

    beta = vertex_quadrature(mesh).weights
    E = _membrane_strain(u_prev)
    g, gp = X[:, GRADIENT_SLOTS], Xp[:, GRADIENT_SLOTS]
    sq = np.sum(g**2, axis=2)
    membrane = (2.0 * sq[..., None] * g
                + np.einsum("tcd,tid->tic", E, g + gp))
    scale = tau * spec.theta * beta
    r_e[:, GRADIENT_SLOTS] += scale[..., None] * membrane

    f = spec.nodal_force(force_scale)[mesh.triangles]
    r_e[:, VALUE_SLOTS] -= tau * beta * f
    if spec.l2_vertical:
        r_e[:, VALUE_SLOTS] += beta * (X[:, VALUE_SLOTS] - Xp[:, VALUE_SLOTS])

    residual = assemble_vector(r_e, edofs, dmap.n_dofs)
    if not jacobian:
        return residual, None

    J_e = (1.0 + tau) * K_e
    block = (4.0 * np.einsum("tic,tid->ticd", g, g)
             + 2.0 * sq[..., None, None] * np.eye(2)
             + E[:, None])
    block *= scale[..., None, None]
    for i in range(3):
        J_e[:, GRADIENT_SLOTS[i][:, None], GRADIENT_SLOTS[i][None, :]] += block[:, i]
    if spec.l2_vertical:
        J_e[:, VALUE_SLOTS, VALUE_SLOTS] += beta
    return residual, assemble_matrix(J_e, edofs, dmap.n_dofs)


def step_merit(u_prev: P1VectorField, x: np.ndarray, x_prev: np.ndarray, tau: float,
               spec: ProblemSpec, dmap: DktDofMap, force_scale: float = 1.0) -> float:
    """G(w) = 1/2|w - w_prev|^2 in the flow metric + tau * (bending + quartic + coupling - load)."""
    mesh = spec.mesh
    ops = element_operators(mesh)
    K_e, _ = bending_element_matrices(mesh)
    edofs = dmap.element_dofs
    X, Xp = x[edofs], x_prev[edofs]
    D = X - Xp
    beta = vertex_quadrature(mesh).weights

    metric = 0.5 * float(np.einsum("tx,txy,ty->", D, K_e, D))
    if spec.l2_vertical:
        metric += 0.5 * float(np.sum(beta * D[:, VALUE_SLOTS] ** 2))

    hess = np.einsum("tqrx,tx->tqr", ops.H, X)
    dev = hess - spec.element_alpha()[:, None, None] * FLAT_IDENTITY
    bending = 0.5 * float(np.sum(ops.weights * np.sum(dev**2, axis=2)))

    E = _membrane_strain(u_prev)
    g, gp = X[:, GRADIENT_SLOTS], Xp[:, GRADIENT_SLOTS]
    quartic = 0.5 * spec.theta * float(np.sum(beta * np.sum(g**2, axis=2) ** 2))
    s = g + gp
    coupling = 0.5 * spec.theta * float(np.sum(beta * np.einsum("tcd,tic,tid->ti", E, s, s)))

    f = spec.nodal_force(force_scale)[mesh.triangles]
    load = float(np.sum(beta * f * X[:, VALUE_SLOTS]))
    return metric + tau * (bending + quartic + coupling - load)


def residual_w(u_prev: P1VectorField, w: DktField, w_prev: DktField, tau: float,
               spec: ProblemSpec, force_scale: float = 1.0) -> np.ndarray:
    dmap = dof_map(spec.mesh)
    residual, _ = assemble_w_step(u_prev, dmap.gather(w), dmap.gather(w_prev), tau, spec,
                                  dmap, force_scale, jacobian=False)
    return residual[free_w_dofs(spec, dmap)]


def jacobian_w(u_prev: P1VectorField, w: DktField, tau: float, spec: ProblemSpec,
               w_prev: DktField | None = None) -> csr_matrix:
    """Jacobian over free dofs. It does not depend on w_prev."""
    dmap = dof_map(spec.mesh)
    x = dmap.gather(w)
    x_prev = dmap.gather(w_prev) if w_prev is not None else x
    _, J = assemble_w_step(u_prev, x, x_prev, tau, spec, dmap)
    free = free_w_dofs(spec, dmap)
    return J[free][:, free]


# ---- Flow metrics ----

def bending_matrix(mesh: Triangulation, dmap: DktDofMap | None = None) -> csr_matrix:
    dmap = dmap or dof_map(mesh)
    K_e, _ = bending_element_matrices(mesh)
    return assemble_matrix(K_e, dmap.element_dofs, dmap.n_dofs)


def vertical_metric(spec: ProblemSpec, dmap: DktDofMap | None = None) -> csr_matrix:
    dmap = dmap or dof_map(spec.mesh)
    K = bending_matrix(spec.mesh, dmap)
    if spec.l2_vertical:
        K = K + diags(_value_mass(spec, dmap))
    return K.tocsr()


def horizontal_metric(spec: ProblemSpec) -> csr_matrix:
    A = strain_matrix(spec.mesh)
    if spec.l2_horizontal:
        A = A + diags(vector_lumped_mass(spec.mesh))
    return A.tocsr()


def metric_norm(matrix: csr_matrix, vec: np.ndarray) -> float:
    return float(np.sqrt(max(vec @ (matrix @ vec), 0.0)))


# ---- u-step ----

@dataclass(frozen=True, eq=False)
class USystem:
    matrix: csr_matrix     # free x free
    residual: np.ndarray   # at the current u, over free dofs
    free: np.ndarray
    size: int

    def correction(self) -> np.ndarray:
        try:
            lu = splu(self.matrix.tocsc())
        except RuntimeError as e:
            raise AssemblyError(f"singular in-plane system: {e}") from e
        delta = np.zeros(self.size)
        delta[self.free] = lu.solve(-self.residual)
        return delta


def free_u_dofs(spec: ProblemSpec) -> np.ndarray:
    mask = np.ones(2 * spec.mesh.n_nodes, dtype=bool)
    mask[2 * spec.u_nodes] = False
    mask[2 * spec.u_nodes + 1] = False
    return np.flatnonzero(mask)


def strain_load(w: DktField, spec: ProblemSpec) -> np.ndarray:
    """b_z = (grad w (x) grad w, eps~(phi_z))_h."""
    mesh = spec.mesh
    beta = vertex_quadrature(mesh).weights
    g = w.vertex_gradients()
    local = np.einsum("ti,tic,tid,tacd->ta", beta, g, g, strain_basis(mesh))
    return assemble_vector(local, vector_dofs(mesh), 2 * mesh.n_nodes)


def residual_and_matrix_u(w: DktField, u: P1VectorField, u_prev: P1VectorField, tau: float,
                          spec: ProblemSpec) -> USystem:
    if len(spec.u_nodes) == 0 and not spec.l2_horizontal:
        raise AssemblyError(
            "in-plane system is singular: no displacement constraints and no L2 metric "
            "leave rigid-body modes"
        )
    A = strain_matrix(spec.mesh)
    M = vector_lumped_mass(spec.mesh) if spec.l2_horizontal else np.zeros(A.shape[0])
    x, xp = u.to_vector(), u_prev.to_vector()
    tt = tau * spec.theta
    residual = A @ (x - xp) + M * (x - xp) + tt * (A @ x + strain_load(w, spec))
    S = ((1.0 + tt) * A + diags(M)).tocsr()
    free = free_u_dofs(spec)
    return USystem(S[free][:, free], residual[free], free, A.shape[0])


def impose_u_boundary(u: P1VectorField, spec: ProblemSpec) -> P1VectorField:
    if len(spec.u_nodes) == 0:
        return u
    out = u.copy()
    data = spec.u_data if spec.u_data is not None else np.zeros((spec.mesh.n_nodes, 2))
    out.values[spec.u_nodes] = data[spec.u_nodes]
    return out


def solve_u_step(w: DktField, u_prev: P1VectorField, tau: float, spec: ProblemSpec) -> P1VectorField:
    u = impose_u_boundary(u_prev, spec)
    system = residual_and_matrix_u(w, u, u_prev, tau, spec)
    return P1VectorField.from_vector(spec.mesh, u.to_vector() + system.correction())


# ---- Diagnostics ----

def diagnostics(w: DktField, u: P1VectorField) -> Diagnostics:
    mesh = w.mesh
    hess = discrete_hessian(w).mean(axis=1)
    area = mesh.areas.sum()
    k1 = float(np.sum(mesh.areas * hess[:, 0, 0]) / area)
    k2 = float(np.sum(mesh.areas * hess[:, 1, 1]) / area)
    r1 = float(np.ptp(u.values[:, 0]))
    r2 = float(np.ptp(u.values[:, 1]))
    q_sym = None
    if r2 < 1e-14:
        log.debug("q_sym undefined: in-plane x2 range %.3e", r2)
    else:
        q_sym = r1 / r2
    return Diagnostics(k1, k2, q_sym)


def hessian_norm(w: DktField) -> float:
    """L2 norm of grad grad_h w (exact midpoint rule)."""
    ops = element_operators(w.mesh)
    hess = discrete_hessian(w).reshape(-1, 3, 4)
    return float(np.sqrt(np.sum(ops.weights * np.sum(hess**2, axis=2))))


def bending_density(w: DktField, spec: ProblemSpec) -> np.ndarray:
    """Elementwise root-mean-square of |grad grad_h w - alpha I|."""
    ops = element_operators(spec.mesh)
    hess = discrete_hessian(w).reshape(-1, 3, 4)
    dev = hess - spec.element_alpha()[:, None, None] * FLAT_IDENTITY
    return np.sqrt(np.sum(ops.weights * np.sum(dev**2, axis=2), axis=1) / spec.mesh.areas)
