import numpy as np
import pytest

from fvkplate.energy import (
    ProblemSpec,
    assemble_energy,
    assemble_w_step,
    auto_metric,
    bending_matrix,
    diagnostics,
    hessian_norm,
    jacobian_w,
    residual_and_matrix_u,
    residual_w,
    solve_u_step,
    step_merit,
    strain_load,
)
from fvkplate.errors import AssemblyError
from fvkplate.fem_dkt import DktField, bending_element_matrices, dkt_interpolate, dof_map
from fvkplate.fem_p1 import (
    P1VectorField,
    assemble_vector,
    collapsed_gauss_rule,
    integrate,
    quadrature_points,
    strain_matrix,
)
from fvkplate.mesh import build_triangulation, make_disc_mesh, make_square_mesh, straight_crease

from .conftest import random_dkt, random_p1, random_layout_vector


def _paraboloid(mesh):
    return dkt_interpolate(mesh, lambda p: 0.5 * np.sum(p**2, axis=1), lambda p: p)


def _random_spec(mesh, rng, **kwargs):
    defaults = dict(theta=3.0, alpha=(1.0, -0.5), force=rng.standard_normal(mesh.n_nodes),
                    l2_vertical=True, l2_horizontal=True)
    defaults.update(kwargs)
    return ProblemSpec(mesh, **defaults)


# ---- Energy ----

def test_flat_state_energy_is_area_times_alpha_squared(square_mesh):
    spec = ProblemSpec(square_mesh, theta=1.0, alpha=(1.0, 1.0))
    energy = assemble_energy(P1VectorField.zeros(square_mesh), DktField.zeros(square_mesh), spec)
    assert energy.bending == pytest.approx(4.0, rel=1e-14)
    assert energy.membrane == 0.0
    assert energy.total == pytest.approx(4.0, rel=1e-14)

    spec = ProblemSpec(square_mesh, theta=1.0, alpha=(0.0, 0.0))
    energy = assemble_energy(P1VectorField.zeros(square_mesh), DktField.zeros(square_mesh), spec)
    assert energy.total == 0.0


def test_paraboloid_has_no_bending_energy():
    mesh = make_disc_mesh(1.0, 0.1)
    spec = ProblemSpec(mesh, theta=0.0, alpha=(1.0, 1.0))
    energy = assemble_energy(P1VectorField.zeros(mesh), _paraboloid(mesh), spec)
    assert energy.bending <= 1e-3
    assert energy.bending == pytest.approx(0.0, abs=1e-16 * mesh.n_triangles)


def test_subdomain_alphas(crease_mesh):
    spec = ProblemSpec(crease_mesh, theta=1.0, alpha=(1.0, 0.0))
    energy = assemble_energy(P1VectorField.zeros(crease_mesh), DktField.zeros(crease_mesh), spec)
    assert energy.bending == pytest.approx(2.0, rel=1e-14)


def test_crease_mesh_with_equal_alphas_matches_plain_mesh():
    plain = make_square_mesh(1.0, 0.5)
    creased = make_square_mesh(1.0, 0.5, straight_crease(0.0))
    assert np.array_equal(plain.nodes, creased.nodes)

    def fields(mesh):
        w = dkt_interpolate(mesh, lambda p: np.sin(p[:, 0]) * np.cos(2 * p[:, 1]),
                            lambda p: np.column_stack([np.cos(p[:, 0]) * np.cos(2 * p[:, 1]),
                                                       -2 * np.sin(p[:, 0]) * np.sin(2 * p[:, 1])]))
        u = P1VectorField.interpolate(mesh, lambda p: 0.1 * p[:, ::-1] ** 2)
        return u, w

    energies = []
    for mesh in (plain, creased):
        spec = ProblemSpec(mesh, theta=7.0, alpha=(0.8, 0.8), force=np.full(mesh.n_nodes, 0.3))
        energies.append(assemble_energy(*fields(mesh), spec))
    assert energies[0] == energies[1]


def _continuum_energy(theta, alpha, force):
    mesh = make_square_mesh(0.5, 0.05, center=(0.5, 0.5))
    bary, weights = collapsed_gauss_rule(8)
    x = quadrature_points(mesh, bary)
    s0, c0 = np.sin(x[..., 0]), np.cos(x[..., 0])
    s1, c1 = np.sin(x[..., 1]), np.cos(x[..., 1])
    a = 0.3
    grad = a * np.stack([c0 * c1, -s0 * s1], axis=-1)
    hxx, hxy = -a * s0 * c1, -a * c0 * s1
    bending = (hxx - alpha) ** 2 * 2 + 2 * hxy**2
    shear = 0.1 * c1 + 0.1 * x[..., 0]
    phi = np.einsum("tqc,tqd->tqcd", grad, grad)
    phi[..., 0, 1] += shear
    phi[..., 1, 0] += shear
    membrane = np.sum(phi**2, axis=(-2, -1))
    load = force * a * s0 * c1
    return (0.5 * integrate(mesh, bending, weights)
            + 0.5 * theta * integrate(mesh, membrane, weights)
            - integrate(mesh, load, weights))


def _discrete_energy(h, theta, alpha, force):
    mesh = make_square_mesh(0.5, h, center=(0.5, 0.5))
    a = 0.3
    w = dkt_interpolate(mesh, lambda p: a * np.sin(p[:, 0]) * np.cos(p[:, 1]),
                        lambda p: a * np.column_stack([np.cos(p[:, 0]) * np.cos(p[:, 1]),
                                                       -np.sin(p[:, 0]) * np.sin(p[:, 1])]))
    u = P1VectorField.interpolate(mesh, lambda p: np.column_stack([0.1 * np.sin(p[:, 1]),
                                                                   0.05 * p[:, 0] ** 2]))
    spec = ProblemSpec(mesh, theta=theta, alpha=(alpha, alpha), force=np.full(mesh.n_nodes, force))
    return assemble_energy(u, w, spec).total


def test_discrete_energy_converges_to_continuum():
    exact = _continuum_energy(2.0, 1.0, 0.5)
    errors = [abs(_discrete_energy(h, 2.0, 1.0, 0.5) - exact) / abs(exact) for h in (0.2, 0.1, 0.05)]
    assert errors[0] > errors[1] > errors[2]


# ---- w-step derivatives ----

@pytest.mark.parametrize("split", [False, True])
def test_merit_gradient_matches_central_differences(crease_mesh, rng, split):
    spec = _random_spec(crease_mesh, rng)
    dmap = dof_map(crease_mesh, split)
    eps = 1e-6
    for _ in range(20):
        x = random_layout_vector(crease_mesh, rng, split)
        xp = random_layout_vector(crease_mesh, rng, split)
        u = random_p1(crease_mesh, rng)
        tau = rng.uniform(0.1, 2.0)
        z = rng.standard_normal(dmap.n_dofs)
        R, _ = assemble_w_step(u, x, xp, tau, spec, dmap, jacobian=False)
        fd = (step_merit(u, x + eps * z, xp, tau, spec, dmap)
              - step_merit(u, x - eps * z, xp, tau, spec, dmap)) / (2 * eps)
        assert fd == pytest.approx(R @ z, rel=1e-6, abs=1e-8)


def test_jacobian_matches_central_differences(disc_mesh, rng):
    spec = _random_spec(disc_mesh, rng)
    dmap = dof_map(disc_mesh)
    eps = 1e-6
    for _ in range(20):
        x = random_layout_vector(disc_mesh, rng)
        xp = random_layout_vector(disc_mesh, rng)
        u = random_p1(disc_mesh, rng)
        tau = rng.uniform(0.1, 2.0)
        z = rng.standard_normal(dmap.n_dofs)
        _, J = assemble_w_step(u, x, xp, tau, spec, dmap)
        plus, _ = assemble_w_step(u, x + eps * z, xp, tau, spec, dmap, jacobian=False)
        minus, _ = assemble_w_step(u, x - eps * z, xp, tau, spec, dmap, jacobian=False)
        fd = (plus - minus) / (2 * eps)
        assert np.linalg.norm(fd - J @ z) <= 1e-5 * np.linalg.norm(J @ z)


def test_jacobian_is_symmetric(disc_mesh, rng):
    spec = _random_spec(disc_mesh, rng)
    J = jacobian_w(random_p1(disc_mesh, rng), random_dkt(disc_mesh, rng), 0.7, spec).toarray()
    assert np.max(np.abs(J - J.T)) <= 1e-12 * np.max(np.abs(J))


def test_jacobian_at_flat_state_is_scaled_bending_matrix(square_mesh):
    spec = ProblemSpec(square_mesh, theta=5.0, alpha=(1.0, 1.0))
    tau = 0.25
    J = jacobian_w(P1VectorField.zeros(square_mesh), DktField.zeros(square_mesh), tau, spec)
    K = bending_matrix(square_mesh)
    assert np.allclose(J.toarray(), (1.0 + tau) * K.toarray(), atol=1e-12)


def test_residual_vanishes_at_stationary_flat_state(square_mesh):
    spec = ProblemSpec(square_mesh, theta=1.0, alpha=(0.0, 0.0))
    zero = DktField.zeros(square_mesh)
    R = residual_w(P1VectorField.zeros(square_mesh), zero, zero, 1.0, spec)
    assert np.all(R == 0.0)


def test_residual_of_flat_state_is_spontaneous_curvature_load(square_mesh):
    spec = ProblemSpec(square_mesh, theta=1.0, alpha=(1.0, 1.0))
    zero = DktField.zeros(square_mesh)
    tau = 0.5
    R = residual_w(P1VectorField.zeros(square_mesh), zero, zero, tau, spec)
    _, load = bending_element_matrices(square_mesh)
    dmap = dof_map(square_mesh)
    expected = -tau * assemble_vector(load, dmap.element_dofs, dmap.n_dofs)
    assert np.allclose(R, expected, atol=1e-13)


# ---- u-step ----

def test_u_step_keeps_flat_state(disc_mesh):
    spec = ProblemSpec(disc_mesh, theta=2.0, l2_horizontal=True)
    u = solve_u_step(DktField.zeros(disc_mesh), P1VectorField.zeros(disc_mesh), 1.0, spec)
    assert np.allclose(u.values, 0.0, atol=1e-14)


def test_u_step_without_membrane_coupling_is_identity(disc_mesh, rng):
    spec = ProblemSpec(disc_mesh, theta=0.0, l2_horizontal=True)
    u_prev = random_p1(disc_mesh, rng)
    u = solve_u_step(random_dkt(disc_mesh, rng), u_prev, 1.0, spec)
    assert np.allclose(u.values, u_prev.values, atol=1e-14)


def test_u_step_matches_dense_single_element(rng):
    nodes = np.array([[0.0, 0.0], [2.0, 0.0], [0.5, 1.5]])
    mesh = build_triangulation(nodes, [[0, 1, 2]])
    theta, tau = 2.5, 0.3
    spec = ProblemSpec(mesh, theta=theta, l2_horizontal=True)
    w = random_dkt(mesh, rng, scale=1.0)
    u_prev = random_p1(mesh, rng, scale=1.0)

    jac = np.column_stack([nodes[1] - nodes[0], nodes[2] - nodes[0]])
    inv = np.linalg.inv(jac)
    lam = np.vstack([-inv.sum(axis=0), inv])      # rows are grad lambda_i
    area = 0.5 * abs(np.linalg.det(jac))
    strains = []
    for i in range(3):
        for c in range(2):
            E = np.zeros((2, 2))
            E[c] = lam[i]
            strains.append(E + E.T)
    A = area * np.array([[np.sum(a * b) for b in strains] for a in strains])
    M = area / 3.0 * np.eye(6)
    g = w.gradients
    b = np.array([sum(area / 3.0 * np.sum(np.outer(g[i], g[i]) * E) for i in range(3))
                  for E in strains])
    S = (1.0 + tau * theta) * A + M
    up = u_prev.to_vector()
    expected = np.linalg.solve(S, (A + M) @ up - tau * theta * b)

    u = solve_u_step(w, u_prev, tau, spec)
    assert np.allclose(u.to_vector(), expected, rtol=1e-12, atol=1e-12 * np.abs(expected).max())


def test_in_plane_gradient_matches_central_differences(disc_mesh, rng):
    spec = _random_spec(disc_mesh, rng)
    w = random_dkt(disc_mesh, rng, scale=0.5)
    u = random_p1(disc_mesh, rng)
    x = u.to_vector()
    grad = spec.theta * (strain_matrix(disc_mesh) @ x + strain_load(w, spec))
    tau = 0.7
    system = residual_and_matrix_u(w, u, u, tau, spec)
    assert np.allclose(system.residual, tau * grad[system.free], rtol=1e-12, atol=1e-12)

    eps = 1e-4
    for _ in range(10):
        z = rng.standard_normal(x.shape)
        plus = assemble_energy(P1VectorField.from_vector(disc_mesh, x + eps * z), w, spec).total
        minus = assemble_energy(P1VectorField.from_vector(disc_mesh, x - eps * z), w, spec).total
        assert (plus - minus) / (2 * eps) == pytest.approx(grad @ z, rel=1e-6, abs=1e-8)


def test_u_step_without_constraints_or_metric_is_rejected(disc_mesh):
    spec = ProblemSpec(disc_mesh, theta=1.0)
    zero = P1VectorField.zeros(disc_mesh)
    with pytest.raises(AssemblyError, match="rigid"):
        residual_and_matrix_u(DktField.zeros(disc_mesh), zero, zero, 1.0, spec)


# ---- Diagnostics ----

def test_paraboloid_diagnostics():
    mesh = make_disc_mesh(1.0, 0.1)
    w = _paraboloid(mesh)
    u = P1VectorField.interpolate(mesh, lambda p: p)
    diag = diagnostics(w, u)
    assert diag.mean_curv_1 == pytest.approx(1.0, abs=5e-2)
    assert diag.mean_curv_2 == pytest.approx(1.0, abs=5e-2)
    assert diag.q_sym == pytest.approx(1.0)
    assert hessian_norm(w) == pytest.approx(np.sqrt(2.0 * mesh.areas.sum()), rel=1e-10)


def test_cylinder_diagnostics(disc_mesh):
    w = dkt_interpolate(disc_mesh, lambda p: 0.5 * p[:, 1] ** 2,
                        lambda p: np.column_stack([0 * p[:, 1], p[:, 1]]))
    diag = diagnostics(w, P1VectorField.zeros(disc_mesh))
    assert diag.mean_curv_1 == pytest.approx(0.0, abs=1e-10)
    assert diag.mean_curv_2 == pytest.approx(1.0, rel=1e-10)
    assert diag.q_sym is None


# ---- Problem setup ----

def test_auto_metric_switches(square_mesh, crease_mesh):
    none = np.empty(0, dtype=int)
    assert auto_metric(square_mesh, none, none) == (True, True)
    assert auto_metric(square_mesh, square_mesh.boundary_nodes, none) == (False, True)
    assert auto_metric(square_mesh, none, square_mesh.boundary_nodes) == (True, False)

    b = crease_mesh.boundary_nodes
    y, x = crease_mesh.nodes[b, 1], crease_mesh.nodes[b, 0]
    top_bottom = b[np.abs(np.abs(y) - 1.0) < 1e-12]
    assert auto_metric(crease_mesh, top_bottom, none) == (False, True)
    left = b[(np.abs(np.abs(y) - 1.0) < 1e-12) & (x <= 1e-12)]
    assert auto_metric(crease_mesh, left, none) == (True, True)


def test_problem_spec_validation(square_mesh):
    interior = square_mesh.nearest_node((0.0, 0.0))
    with pytest.raises(ValueError, match="boundary"):
        ProblemSpec(square_mesh, w_boundary="clamped", w_nodes=[interior])
    with pytest.raises(ValueError):
        ProblemSpec(square_mesh, theta=-1.0)
    with pytest.raises(ValueError):
        ProblemSpec(square_mesh, w_boundary="hinged")
    spec = ProblemSpec(square_mesh, alpha=(1.0, 2.0)).with_parameter("alpha1", 3.0)
    assert spec.alpha == (3.0, 2.0)
    with pytest.raises(ValueError):
        spec.with_parameter("gamma", 1.0)
