"""Decoupled discrete gradient flow with adaptive steps and Newton inner solves."""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import repeat

import numpy as np
from scipy.sparse import bmat, csr_matrix
from scipy.sparse.linalg import splu

from .energy import (
    Diagnostics,
    EnergyBreakdown,
    ProblemSpec,
    assemble_energy,
    assemble_w_step,
    diagnostics,
    horizontal_metric,
    impose_u_boundary,
    metric_norm,
    solve_u_step,
    vertical_metric,
    w_dirichlet,
    w_pinned,
)
from .errors import AssemblyError, FlowAbort
from .fem_dkt import DktDofMap, DktField, dof_map
from .fem_p1 import P1VectorField

log = logging.getLogger(__name__)

SOLVE_WARN = 1e-10
SOLVE_FAIL = 1e-6


@dataclass(frozen=True)
class SolverConfig:
    tau_initial: float = 1.0
    tau_max: float = 1e5
    newton_max_iter: int = 5
    newton_tol: float = 1e-5
    stop_tol: float = 1e-12
    max_iterations: int = 200
    shrink: float = 2.0
    growth: float = 2.0
    tau_min: float = 1e-14
    ramp_iterations: int = 0
    energy_slack: float = 1e-10

    def __post_init__(self) -> None:
        for name in ("tau_initial", "tau_max", "newton_tol", "stop_tol", "tau_min", "energy_slack"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.newton_max_iter < 1 or self.max_iterations < 1:
            raise ValueError("newton_max_iter and max_iterations must be at least 1")
        if self.shrink <= 1 or self.growth < 1:
            raise ValueError("shrink must exceed 1 and growth must be at least 1")
        if self.ramp_iterations < 0:
            raise ValueError("ramp_iterations must be non-negative")

    def force_scale(self, k: int) -> float:
        if self.ramp_iterations == 0:
            return 1.0
        return min(1.0, k / self.ramp_iterations)


# ---- Constraints ----

@dataclass(frozen=True, eq=False)
class ConstraintSet:
    dirichlet_dofs: np.ndarray
    dirichlet_values: np.ndarray
    pinned_dofs: np.ndarray
    crease_pairs: np.ndarray  # (k, 2) value dofs identified across the crease
    n_dofs: int

    def __post_init__(self) -> None:
        fixed = np.concatenate([self.dirichlet_dofs, self.pinned_dofs])
        if len(np.unique(fixed)) != len(fixed):
            raise AssemblyError("a dof is both Dirichlet and pinned")
        if len(self.crease_pairs):
            flat = self.crease_pairs.ravel()
            if len(np.unique(flat)) != len(flat):
                raise AssemblyError("crease coupling rows are not independent")

    @property
    def fixed(self) -> np.ndarray:
        return np.concatenate([self.dirichlet_dofs, self.pinned_dofs])

    def free_mask(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.fixed] = False
        return mask

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = x.copy()
        x[self.dirichlet_dofs] = self.dirichlet_values
        x[self.pinned_dofs] = 0.0
        return x

    def free_pairs(self) -> np.ndarray:
        """Crease pairs with both copies free, in free-dof numbering."""
        mask = self.free_mask()
        index = np.cumsum(mask) - 1
        keep = mask[self.crease_pairs].all(axis=1) if len(self.crease_pairs) else np.empty(0, bool)
        return index[self.crease_pairs[keep]]


def build_constraints(spec: ProblemSpec, dmap: DktDofMap) -> ConstraintSet:
    dofs, values = w_dirichlet(spec, dmap)
    pinned = np.setdiff1d(w_pinned(spec, dmap), dofs)
    return ConstraintSet(dofs, values, pinned, dmap.crease_value_pairs(), dmap.n_dofs)


# ---- Linear algebra ----

def _direct_solve(matrix: csr_matrix, rhs: np.ndarray) -> np.ndarray | None:
    try:
        lu = splu(matrix.tocsc())
    except RuntimeError as e:
        log.debug("Factorization failed: %s", e)
        return None
    sol = lu.solve(rhs)
    if not np.all(np.isfinite(sol)):
        return None
    scale = max(np.linalg.norm(rhs), 1e-300)
    rel = np.linalg.norm(matrix @ sol - rhs) / scale
    if rel > SOLVE_FAIL:
        log.warning("Linear solve residual %.3e, rejecting", rel)
        return None
    if rel > SOLVE_WARN:
        log.warning("Linear solve residual %.3e above %.0e", rel, SOLVE_WARN)
    return sol


def apply_crease_coupling(matrix: csr_matrix, rhs: np.ndarray, pairs: np.ndarray):
    """Saddle system [[J, B^T], [B, 0]] with B x = x[p1] - x[p2] for each pair.

    Returns (system, rhs, recover) where recover(sol) -> (x, multipliers).
    """
    n = matrix.shape[0]
    m = len(pairs)
    if m == 0:
        return matrix, rhs, lambda sol: (sol, np.empty(0))
    if np.any(pairs[:, 0] == pairs[:, 1]) or len(np.unique(pairs.ravel())) != 2 * m:
        raise AssemblyError("rank-deficient crease coupling: repeated dofs in constraint rows")
    rows = np.repeat(np.arange(m), 2)
    cols = pairs.ravel()
    data = np.tile([1.0, -1.0], m)
    B = csr_matrix((data, (rows, cols)), shape=(m, n))
    system = bmat([[matrix, B.T], [B, None]], format="csr")
    full_rhs = np.concatenate([rhs, np.zeros(m)])
    return system, full_rhs, lambda sol: (sol[:n], sol[n:])


def _newton_correction(J: csr_matrix, R: np.ndarray, cons: ConstraintSet) -> np.ndarray | None:
    free = cons.free_mask()
    J_ff = J[free][:, free]
    system, rhs, recover = apply_crease_coupling(J_ff, -R[free], cons.free_pairs())
    sol = _direct_solve(system, rhs)
    if sol is None:
        return None
    delta = np.zeros(cons.n_dofs)
    delta[free] = recover(sol)[0]
    return delta


# ---- Flow state ----

@dataclass
class NewtonResult:
    w: DktField
    residuals: list[float]
    crease_jump: float


@dataclass
class IterationRecord:
    k: int
    tau: float
    bending: float
    membrane: float
    force: float
    total: float
    elastic: float
    dt_w: float
    dt_u: float
    newton_iterations: int
    halvings: int
    crease_jump: float
    mean_curv_1: float
    mean_curv_2: float
    q_sym: float | None


@dataclass
class FlowState:
    u: P1VectorField
    w: DktField
    tau: float
    k: int = 0
    energy_history: list[EnergyBreakdown] = field(default_factory=list)
    step_history: list[float] = field(default_factory=list)
    diagnostics_history: list[Diagnostics] = field(default_factory=list)
    newton_history: list[list[float]] = field(default_factory=list)
    records: list[IterationRecord] = field(default_factory=list)
    dissipation: float = 0.0
    converged: bool = False

    @property
    def energy(self) -> EnergyBreakdown | None:
        return self.energy_history[-1] if self.energy_history else None


def newton_solve_w(state: FlowState, spec: ProblemSpec, cfg: SolverConfig,
                   tau: float | None = None) -> NewtonResult | None:
    """Newton iteration for the w-step; None when it does not reach the tolerance."""
    tau = state.tau if tau is None else tau
    dmap = dof_map(spec.mesh, split=spec.mesh.has_crease)
    cons = build_constraints(spec, dmap)
    metric = vertical_metric(spec, dmap)
    scale = cfg.force_scale(state.k + 1)

    x_prev = dmap.gather(state.w)
    x = cons.apply(x_prev)

    def correction(x):
        R, J = assemble_w_step(state.u, x, x_prev, tau, spec, dmap, scale)
        return _newton_correction(J, R, cons)

    delta = correction(x)
    if delta is None:
        return None
    residuals = []
    for i in range(1, cfg.newton_max_iter + 1):
        x = x + delta
        delta = correction(x)
        if delta is None:
            return None
        r = metric_norm(metric, delta) / tau
        residuals.append(r)
        log.debug("Newton %d: tau=%.3e residual=%.3e", i, tau, r)
        if not np.isfinite(r):
            return None
        if r <= cfg.newton_tol:
            w_new, jump = dmap.scatter(x + delta)
            return NewtonResult(w_new, residuals, jump)
    return None


def flow_step(state: FlowState, spec: ProblemSpec, cfg: SolverConfig) -> FlowState:
    tau = state.tau
    halvings = 0
    scale = cfg.force_scale(state.k + 1)
    e_old = assemble_energy(state.u, state.w, spec, scale)
    while True:
        if tau < cfg.tau_min:
            log.error("Step size %.3e below %.0e at iteration %d", tau, cfg.tau_min, state.k + 1)
            raise FlowAbort(f"step size underflow at iteration {state.k + 1}", state)
        result = newton_solve_w(state, spec, cfg, tau)
        if result is None:
            log.debug("Newton failed at tau=%.3e, halving", tau)
            tau /= cfg.shrink
            halvings += 1
            continue
        u_new = solve_u_step(result.w, state.u, tau, spec)
        e_new = assemble_energy(u_new, result.w, spec, scale)
        slack = cfg.energy_slack * max(abs(e_old.total), 1.0)
        if e_new.total > e_old.total + slack:
            log.warning("Energy increase %.3e at tau=%.3e, halving",
                        e_new.total - e_old.total, tau)
            tau /= cfg.shrink
            halvings += 1
            continue
        break

    shared = dof_map(spec.mesh)
    dw = shared.gather(result.w) - shared.gather(state.w)
    du = u_new.to_vector() - state.u.to_vector()
    dt_w = metric_norm(vertical_metric(spec, shared), dw) / tau
    dt_u = metric_norm(horizontal_metric(spec), du) / tau
    diag = diagnostics(result.w, u_new)

    k = state.k + 1
    record = IterationRecord(
        k=k, tau=tau, bending=e_new.bending, membrane=e_new.membrane, force=e_new.force,
        total=e_new.total, elastic=e_new.elastic, dt_w=dt_w, dt_u=dt_u,
        newton_iterations=len(result.residuals), halvings=halvings,
        crease_jump=result.crease_jump, mean_curv_1=diag.mean_curv_1,
        mean_curv_2=diag.mean_curv_2, q_sym=diag.q_sym,
    )
    log.info("Step %d: tau=%.3e E=%.10g |dt w|=%.3e |dt u|=%.3e", k, tau, e_new.total, dt_w, dt_u)
    return FlowState(
        u=u_new,
        w=result.w,
        tau=min(cfg.growth * tau, cfg.tau_max),
        k=k,
        energy_history=state.energy_history + [e_new],
        step_history=state.step_history + [tau],
        diagnostics_history=state.diagnostics_history + [diag],
        newton_history=state.newton_history + [result.residuals],
        records=state.records + [record],
        dissipation=state.dissipation + tau * (dt_w**2 + dt_u**2),
        converged=dt_w + dt_u <= cfg.stop_tol * min(1.0, tau),
    )


def initial_state(u0: P1VectorField, w0: DktField, spec: ProblemSpec, cfg: SolverConfig) -> FlowState:
    """Project the initial pair onto the constraints and record its energy."""
    shared = dof_map(spec.mesh)
    cons = build_constraints(spec, shared)
    x0 = shared.gather(w0)
    x = cons.apply(x0)
    if not np.allclose(x, x0, rtol=0.0, atol=1e-12):
        log.info("Initial deflection projected onto the boundary conditions")
    w = shared.scatter(x)[0]
    u = impose_u_boundary(u0, spec)
    energy = assemble_energy(u, w, spec, cfg.force_scale(0))
    return FlowState(u=u, w=w, tau=cfg.tau_initial, energy_history=[energy],
                     diagnostics_history=[diagnostics(w, u)])


def run_flow(u0: P1VectorField, w0: DktField, spec: ProblemSpec, cfg: SolverConfig,
             on_step=None) -> FlowState:
    state = initial_state(u0, w0, spec, cfg)
    while state.k < cfg.max_iterations:
        state = flow_step(state, spec, cfg)
        if on_step is not None:
            on_step(state)
        if state.converged:
            break
    log.info("Flow %s after %d iterations, E=%.10g",
             "converged" if state.converged else "stopped", state.k, state.energy.total)
    return state


# ---- Sweeps ----

def transition_point(values, states: list[FlowState], threshold: float = 0.1) -> float | None:
    """First parameter value whose directional mean curvatures differ by more than threshold."""
    for value, state in zip(values, states):
        diag = state.diagnostics_history[-1]
        if abs(diag.mean_curv_1 - diag.mean_curv_2) > threshold:
            return float(value)
    return None


def continuation_sweep(parameter: str, values, spec: ProblemSpec, cfg: SolverConfig,
                       initial: tuple[P1VectorField, DktField] | None = None,
                       on_point=None) -> list[FlowState]:
    """Run the flow for each value in order, warm-starting from the previous final state."""
    values = list(values)
    if not values:
        raise ValueError("sweep schedule is empty")
    if initial is None:
        initial = (P1VectorField.zeros(spec.mesh), DktField.zeros(spec.mesh))
    u0, w0 = initial
    states = []
    for value in values:
        log.info("Sweep point %s=%g", parameter, value)
        state = run_flow(u0, w0, spec.with_parameter(parameter, value), cfg)
        states.append(state)
        if on_point is not None:
            on_point(value, state)
        u0, w0 = state.u, state.w
    return states


def _run_point(spec: ProblemSpec, cfg: SolverConfig, u0: P1VectorField, w0: DktField) -> FlowState:
    return run_flow(u0, w0, spec, cfg)


def independent_sweep(parameter: str, values, spec: ProblemSpec, cfg: SolverConfig,
                      initial: tuple[P1VectorField, DktField] | None = None,
                      workers: int = 1) -> list[FlowState]:
    """Run every value from the same initial state; points run in a process pool."""
    values = list(values)
    if not values:
        raise ValueError("sweep schedule is empty")
    if initial is None:
        initial = (P1VectorField.zeros(spec.mesh), DktField.zeros(spec.mesh))
    points = [spec.with_parameter(parameter, v) for v in values]
    if workers <= 1 or len(points) == 1:
        return [_run_point(p, cfg, *initial) for p in points]
    log.info("Running %d sweep points on %d workers", len(points), workers)
    u0, w0 = initial
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_point, points, repeat(cfg), repeat(u0), repeat(w0)))
