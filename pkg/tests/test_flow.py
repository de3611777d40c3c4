import numpy as np
import pytest
from scipy.sparse import identity

from fvkplate.energy import Diagnostics, ProblemSpec, assemble_w_step
from fvkplate.errors import AssemblyError, FlowAbort
from fvkplate.fem_dkt import DktField, dkt_interpolate, dof_map
from fvkplate.fem_p1 import P1VectorField
from fvkplate.flow import (
    FlowState,
    SolverConfig,
    apply_crease_coupling,
    build_constraints,
    continuation_sweep,
    flow_step,
    independent_sweep,
    initial_state,
    newton_solve_w,
    run_flow,
    transition_point,
    _direct_solve,
    _newton_correction,
)
from fvkplate.mesh import make_square_mesh, straight_crease

from .conftest import random_dkt, random_p1


def _flat(mesh):
    return P1VectorField.zeros(mesh), DktField.zeros(mesh)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(tau_initial=0.0)
    with pytest.raises(ValueError):
        SolverConfig(newton_max_iter=0)
    with pytest.raises(ValueError):
        SolverConfig(shrink=1.0)
    cfg = SolverConfig(ramp_iterations=4)
    assert [cfg.force_scale(k) for k in (1, 2, 4, 9)] == [0.25, 0.5, 1.0, 1.0]
    assert SolverConfig().force_scale(1) == 1.0


# ---- Newton ----

def test_stationary_state_needs_one_newton_iteration(disc_mesh):
    spec = ProblemSpec(disc_mesh, theta=1.0, alpha=(0.0, 0.0), l2_vertical=True, l2_horizontal=True)
    state = initial_state(*_flat(disc_mesh), spec, SolverConfig())
    result = newton_solve_w(state, spec, SolverConfig())
    assert len(result.residuals) == 1
    assert np.array_equal(result.w.values, state.w.values)
    assert np.array_equal(result.w.gradients, state.w.gradients)


def test_linear_problem_converges_in_one_newton_iteration(disc_mesh):
    spec = ProblemSpec(disc_mesh, theta=0.0, alpha=(1.0, 1.0), l2_vertical=True, l2_horizontal=True)
    cfg = SolverConfig()
    state = initial_state(*_flat(disc_mesh), spec, cfg)
    result = newton_solve_w(state, spec, cfg)
    assert len(result.residuals) == 1
    assert result.residuals[0] <= cfg.newton_tol
    assert np.max(np.abs(result.w.values)) > 0


def test_crease_saddle_matches_dense_kkt(rng):
    mesh = make_square_mesh(1.0, 1.0, straight_crease(0.0))
    spec = ProblemSpec(mesh, theta=2.0, alpha=(1.0, -1.0), l2_vertical=True, l2_horizontal=True)
    dmap = dof_map(mesh, split=True)
    x = 0.1 * rng.standard_normal(dmap.n_dofs)
    xp = 0.1 * rng.standard_normal(dmap.n_dofs)
    R, J = assemble_w_step(random_p1(mesh, rng), x, xp, 0.5, spec, dmap)
    pairs = dmap.crease_value_pairs()
    assert len(pairs) == 3

    system, rhs, recover = apply_crease_coupling(J, -R, pairs)
    delta, multipliers = recover(_direct_solve(system, rhs))

    n, m = dmap.n_dofs, len(pairs)
    B = np.zeros((m, n))
    B[np.arange(m), pairs[:, 0]] = 1.0
    B[np.arange(m), pairs[:, 1]] = -1.0
    kkt = np.block([[J.toarray(), B.T], [B, np.zeros((m, m))]])
    dense = np.linalg.solve(kkt, np.concatenate([-R, np.zeros(m)]))
    assert np.allclose(delta, dense[:n], atol=1e-10)
    assert np.allclose(multipliers, dense[n:], atol=1e-10)
    assert np.allclose(delta[pairs[:, 0]], delta[pairs[:, 1]], atol=1e-10)


def test_split_layout_agrees_with_shared_layout(crease_mesh, rng):
    spec = ProblemSpec(crease_mesh, theta=2.0, alpha=(1.0, 0.0), l2_vertical=True, l2_horizontal=True)
    u = random_p1(crease_mesh, rng)
    w, wp = random_dkt(crease_mesh, rng), random_dkt(crease_mesh, rng)
    deltas = []
    for split in (False, True):
        dmap = dof_map(crease_mesh, split)
        R, J = assemble_w_step(u, dmap.gather(w), dmap.gather(wp), 0.5, spec, dmap)
        delta = _newton_correction(J, R, build_constraints(spec, dmap))
        field, jump = dmap.scatter(delta)
        assert jump <= 1e-10
        deltas.append(dof_map(crease_mesh).gather(field))
    assert np.allclose(deltas[0], deltas[1], atol=1e-10)


def test_zero_residual_gives_zero_multipliers(crease_mesh):
    dmap = dof_map(crease_mesh, split=True)
    spec = ProblemSpec(crease_mesh, theta=1.0, alpha=(0.0, 0.0), l2_vertical=True)
    zero = np.zeros(dmap.n_dofs)
    R, J = assemble_w_step(P1VectorField.zeros(crease_mesh), zero, zero, 1.0, spec, dmap)
    system, rhs, recover = apply_crease_coupling(J, -R, dmap.crease_value_pairs())
    delta, multipliers = recover(_direct_solve(system, rhs))
    assert np.all(delta == 0.0)
    assert np.all(multipliers == 0.0)


def test_repeated_coupling_dofs_are_rejected(crease_mesh):
    dmap = dof_map(crease_mesh, split=True)
    pairs = dmap.crease_value_pairs()
    bad = np.vstack([pairs, pairs[:1]])
    J = identity(dmap.n_dofs, format="csr")
    with pytest.raises(AssemblyError, match="rank-deficient"):
        apply_crease_coupling(J, np.zeros(dmap.n_dofs), bad)


# ---- Flow ----

def test_flat_stationary_flow_stops_after_one_step(disc_mesh):
    spec = ProblemSpec(disc_mesh, theta=1.0, alpha=(0.0, 0.0), l2_vertical=True, l2_horizontal=True)
    state = run_flow(*_flat(disc_mesh), spec, SolverConfig())
    assert state.k == 1
    assert state.converged
    assert state.energy.total == 0.0


def test_energy_decreases_and_dissipation_is_bounded(disc_mesh):
    spec = ProblemSpec(disc_mesh, theta=10.0, alpha=(1.0, 1.0), l2_vertical=True, l2_horizontal=True)
    cfg = SolverConfig(max_iterations=30)
    seen = []
    state = run_flow(*_flat(disc_mesh), spec, cfg, on_step=lambda s: seen.append(s.k))
    totals = np.array([e.total for e in state.energy_history])
    slack = 1e-10 * np.maximum(np.abs(totals[:-1]), 1.0)
    assert np.all(totals[1:] <= totals[:-1] + slack)
    e0, ek = totals[0], totals[-1]
    assert state.dissipation <= e0 - ek + 1e-8 * max(abs(e0), 1.0)
    assert seen == list(range(1, state.k + 1))
    assert len(state.records) == state.k
    assert all(r.tau <= cfg.tau_max for r in state.records)


def test_step_size_doubles_after_acceptance(disc_mesh):
    spec = ProblemSpec(disc_mesh, theta=0.0, alpha=(1.0, 1.0), l2_vertical=True, l2_horizontal=True)
    cfg = SolverConfig(tau_initial=0.125, tau_max=1.0)
    state = initial_state(*_flat(disc_mesh), spec, cfg)
    for expected in (0.25, 0.5, 1.0, 1.0):
        state = flow_step(state, spec, cfg)
        assert state.tau == expected


def test_newton_failure_halves_until_abort(disc_mesh):
    spec = ProblemSpec(disc_mesh, theta=1.0, alpha=(1.0, 1.0), l2_vertical=True, l2_horizontal=True)
    cfg = SolverConfig(newton_max_iter=1, newton_tol=1e-300, tau_min=1e-3)
    state = initial_state(*_flat(disc_mesh), spec, cfg)
    with pytest.raises(FlowAbort) as info:
        flow_step(state, spec, cfg)
    assert info.value.state is state


def test_crease_values_stay_continuous(crease_mesh):
    b = crease_mesh.boundary_nodes
    top_bottom = b[np.abs(np.abs(crease_mesh.nodes[b, 1]) - 1.0) < 1e-12]
    spec = ProblemSpec(crease_mesh, theta=1.0, alpha=(1.0, 0.0), w_boundary="simple",
                       w_nodes=top_bottom, l2_horizontal=True)
    state = run_flow(*_flat(crease_mesh), spec, SolverConfig(max_iterations=10))
    assert state.k >= 1
    assert max(r.crease_jump for r in state.records) <= 1e-9
    assert np.all(state.w.values[top_bottom] == 0.0)


def test_pinned_center_stays_at_zero(disc_mesh):
    center = disc_mesh.nearest_node((0.0, 0.0))
    spec = ProblemSpec(disc_mesh, theta=0.0, alpha=(1.0, 1.0), pinned_node=center,
                       l2_vertical=True, l2_horizontal=True)
    state = run_flow(*_flat(disc_mesh), spec, SolverConfig(max_iterations=5))
    assert state.w.values[center] == 0.0
    assert np.max(np.abs(state.w.values)) > 0


def test_dirichlet_data_is_projected_into_initial_state(square_mesh):
    data = dkt_interpolate(square_mesh, lambda p: 1.0 - p[:, 1] ** 2,
                           lambda p: np.column_stack([0 * p[:, 1], -2 * p[:, 1]]))
    b = square_mesh.boundary_nodes
    spec = ProblemSpec(square_mesh, w_boundary="clamped", w_nodes=b, w_data=data,
                       l2_horizontal=True)
    state = initial_state(*_flat(square_mesh), spec, SolverConfig())
    assert np.allclose(state.w.values[b], data.values[b])
    assert np.allclose(state.w.gradients[b], data.gradients[b])


# ---- Sweeps ----

def test_single_entry_sweep_equals_plain_run(disc_mesh):
    spec = ProblemSpec(disc_mesh, theta=1.0, alpha=(1.0, 1.0), l2_vertical=True, l2_horizontal=True)
    cfg = SolverConfig(max_iterations=5)
    plain = run_flow(*_flat(disc_mesh), spec.with_parameter("theta", 3.0), cfg)
    swept = continuation_sweep("theta", [3.0], spec, cfg)
    assert len(swept) == 1
    assert swept[0].energy.total == plain.energy.total
    assert np.array_equal(swept[0].w.values, plain.w.values)

    independent = independent_sweep("theta", [3.0], spec, cfg)
    assert independent[0].energy.total == plain.energy.total


def test_process_pool_sweep_matches_serial_sweep(disc_mesh):
    spec = ProblemSpec(disc_mesh, theta=1.0, alpha=(1.0, 1.0), l2_vertical=True, l2_horizontal=True)
    cfg = SolverConfig(max_iterations=3)
    serial = independent_sweep("theta", [1.0, 10.0], spec, cfg, workers=1)
    pooled = independent_sweep("theta", [1.0, 10.0], spec, cfg, workers=2)
    assert [s.k for s in pooled] == [s.k for s in serial]
    for a, b in zip(pooled, serial):
        assert a.energy.total == pytest.approx(b.energy.total, rel=1e-12)
        assert np.allclose(a.w.values, b.w.values, rtol=0.0, atol=1e-12)


def test_empty_sweep_is_rejected(disc_mesh):
    spec = ProblemSpec(disc_mesh, l2_vertical=True, l2_horizontal=True)
    with pytest.raises(ValueError):
        continuation_sweep("theta", [], spec, SolverConfig())


def test_transition_point_detects_first_split(disc_mesh):
    def state(k1, k2):
        return FlowState(*_flat(disc_mesh), tau=1.0,
                         diagnostics_history=[Diagnostics(k1, k2, None)])

    states = [state(1.0, 1.0), state(0.98, 1.02), state(0.8, 1.2), state(0.1, 1.5)]
    assert transition_point([1, 26, 51, 76], states) == 51.0
    assert transition_point([1, 26], states[:2]) is None
