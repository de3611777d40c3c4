"""Experiment runners: flat disc sweep, curvature inversion, cardboard, bilayer fold."""

import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .config import ExperimentConfig
from .energy import ProblemSpec, auto_metric, hessian_norm, solve_u_step
from .errors import AssemblyError, FlowAbort, MeshError
from .export import (
    export_surface,
    records_frame,
    write_csv,
    write_manifest,
    write_mesh,
)
from .fem_dkt import DktField, dkt_interpolate
from .fem_p1 import P1VectorField
from .flow import (
    FlowState,
    SolverConfig,
    continuation_sweep,
    independent_sweep,
    run_flow,
    transition_point,
)
from .mesh import (
    CreaseSpec,
    Triangulation,
    arc_crease,
    make_disc_mesh,
    make_square_mesh,
    straight_crease,
)

log = logging.getLogger(__name__)


@dataclass
class RunContext:
    config: ExperimentConfig
    directory: str
    outputs: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def path(self, *parts: str) -> str:
        return os.path.join(self.directory, *parts)

    def add(self, path: str) -> str:
        self.outputs.append(path)
        return path


# ---- Building blocks ----

def build_crease(config: ExperimentConfig, kind: str | None = None) -> CreaseSpec:
    kind = kind or config.crease
    if kind == "straight":
        return straight_crease(config.crease_x, config.half_width)
    if kind == "arc":
        return arc_crease(config.half_width)
    return CreaseSpec()


def build_mesh(config: ExperimentConfig, crease: CreaseSpec | None = None) -> Triangulation:
    if config.domain == "disc":
        return make_disc_mesh(config.radius, config.h)
    return make_square_mesh(config.half_width, config.h, crease or build_crease(config))


def support_nodes(mesh: Triangulation, support: str, half_width: float) -> np.ndarray:
    boundary = mesh.boundary_nodes
    if support == "none":
        return np.empty(0, dtype=int)
    if support == "all":
        return boundary
    y = mesh.nodes[boundary, 1]
    tol = 1e-9 * half_width
    on_edges = np.abs(np.abs(y) - half_width) <= tol
    if support == "top_bottom":
        return boundary[on_edges]
    # left of the crease on the top and bottom edges, crease endpoints included
    cp = mesh.nodes[mesh.crease_nodes]
    g = np.interp(y, cp[:, 1], cp[:, 0])
    left = mesh.nodes[boundary, 0] <= g + tol
    return boundary[on_edges & left]


def cylinder_data(mesh: Triangulation) -> DktField:
    """w_D(x) = -(x2^2 - 1)/2."""
    return dkt_interpolate(
        mesh,
        lambda p: -0.5 * (p[:, 1] ** 2 - 1.0),
        lambda p: np.column_stack([np.zeros(len(p)), -p[:, 1]]),
    )


def build_problem(config: ExperimentConfig, mesh: Triangulation) -> ProblemSpec:
    force = None
    if config.force != 0.0:
        if config.force_radius > 0:
            inside = np.linalg.norm(mesh.nodes, axis=1) <= config.force_radius * (1.0 + 1e-9)
            force = np.where(inside, config.force, 0.0)
        else:
            force = np.full(mesh.n_nodes, config.force)
        if not np.any(force):
            log.warning("Force disc of radius %g contains no mesh node", config.force_radius)

    w_nodes = support_nodes(mesh, config.support, config.half_width)
    w_data = cylinder_data(mesh) if config.w_data == "cylinder" else None
    u_nodes = np.empty(0, dtype=int)

    if config.l2_metric == "auto":
        l2_vertical, l2_horizontal = auto_metric(mesh, w_nodes, u_nodes)
    else:
        l2_vertical = l2_horizontal = config.l2_metric == "on"

    return ProblemSpec(
        mesh=mesh,
        theta=config.theta,
        alpha=(config.alpha1, config.alpha2),
        force=force,
        w_boundary=config.w_boundary,
        w_nodes=w_nodes,
        w_data=w_data,
        u_nodes=u_nodes,
        l2_vertical=l2_vertical,
        l2_horizontal=l2_horizontal,
        pinned_node=mesh.nearest_node((0.0, 0.0)) if config.pin_center else None,
    )


def solver_config(config: ExperimentConfig) -> SolverConfig:
    return SolverConfig(
        tau_initial=config.tau_initial,
        tau_max=config.tau_max,
        newton_max_iter=config.newton_max_iter,
        newton_tol=config.newton_tol,
        stop_tol=config.stop_tol,
        max_iterations=config.max_iterations,
        ramp_iterations=config.ramp_iterations,
    )


def saddle_field(mesh: Triangulation, eps: float) -> DktField:
    """w(x) = eps (x1^2 - x2^2)/2, directional curvatures +eps and -eps."""
    return dkt_interpolate(
        mesh,
        lambda p: 0.5 * eps * (p[:, 0] ** 2 - p[:, 1] ** 2),
        lambda p: eps * np.column_stack([p[:, 0], -p[:, 1]]),
    )


def initial_fields(config: ExperimentConfig, spec: ProblemSpec) -> tuple[P1VectorField, DktField]:
    mesh = spec.mesh
    w0 = saddle_field(mesh, config.w0_saddle)
    if spec.w_data is not None:
        w0 = DktField(mesh, w0.values + spec.w_data.values, w0.gradients + spec.w_data.gradients)
    u0 = P1VectorField.zeros(mesh)
    if config.relax_u:
        # in-plane relaxation of the initial deflection, itself an energy-decreasing u-step
        u0 = solve_u_step(w0, u0, config.tau_max, spec)
    return u0, w0


def _snapshot_hook(ctx: RunContext, spec: ProblemSpec, prefix: str):
    wanted = set(ctx.config.snapshot_iterations)

    def hook(state: FlowState) -> None:
        if ctx.config.export_surfaces and state.k in wanted:
            ctx.add(export_surface(state, spec, ctx.path("surfaces", f"{prefix}k{state.k:04d}.vtk"),
                                   ctx.config.displacement_scale))
    return hook


def _final_surface(ctx: RunContext, state: FlowState, spec: ProblemSpec, name: str) -> None:
    if ctx.config.export_surfaces:
        ctx.add(export_surface(state, spec, ctx.path("surfaces", name),
                               ctx.config.displacement_scale))


def _point_row(parameter: str, value: float, state: FlowState) -> dict:
    diag = state.diagnostics_history[-1]
    energy = state.energy_history[-1]
    return {
        parameter: value,
        "iterations": state.k,
        "converged": state.converged,
        "bending": energy.bending,
        "membrane": energy.membrane,
        "total": energy.total,
        "mean_curv_1": diag.mean_curv_1,
        "mean_curv_2": diag.mean_curv_2,
        "q_sym": diag.q_sym,
        "hessian_norm": hessian_norm(state.w),
        "max_abs_w": float(np.max(np.abs(state.w.values))),
        "dissipation": state.dissipation,
    }


def _has_interior_maximum(values: np.ndarray) -> bool:
    if len(values) < 3:
        return False
    top = int(np.argmax(values))
    return 0 < top < len(values) - 1


def energy_below(depth_a: np.ndarray, energy_a: np.ndarray,
                 depth_b: np.ndarray, energy_b: np.ndarray, rtol: float = 1e-9) -> bool:
    """Whether energy curve a lies on or below curve b over their shared indentation range.

    Each curve is checked at its own samples against the other one interpolated
    linearly in the indentation. Samples are ordered by indentation first.
    """
    oa = np.argsort(depth_a, kind="stable")
    ob = np.argsort(depth_b, kind="stable")
    da, ea = np.asarray(depth_a)[oa], np.asarray(energy_a)[oa]
    db, eb = np.asarray(depth_b)[ob], np.asarray(energy_b)[ob]
    lo, hi = max(da[0], db[0]), min(da[-1], db[-1])
    if hi < lo:
        log.warning("Energy curves share no indentation range")
        return False
    tol = rtol * max(float(np.max(np.abs(eb))), 1.0)
    at_a = (da >= lo) & (da <= hi)
    at_b = (db >= lo) & (db <= hi)
    below_a = ea[at_a] <= np.interp(da[at_a], db, eb) + tol
    below_b = np.interp(db[at_b], da, ea) <= eb[at_b] + tol
    if not (below_a.all() and below_b.all()):
        worst = np.concatenate([da[at_a][~below_a], db[at_b][~below_b]])
        log.info("Energy ordering violated at indentation %s", np.round(worst, 6).tolist())
        return False
    return True


def right_subdomain_max(state: FlowState) -> float:
    mesh = state.w.mesh
    nodes = np.unique(mesh.triangles[mesh.subdomain == 2])
    return float(np.max(np.abs(state.w.values[nodes]))) if len(nodes) else 0.0


# ---- Experiments ----

def run_single(ctx: RunContext) -> None:
    config = ctx.config
    mesh = build_mesh(config)
    ctx.add(write_mesh(mesh, ctx.path("mesh.vtk")))
    spec = build_problem(config, mesh)
    u0, w0 = initial_fields(config, spec)
    state = run_flow(u0, w0, spec, solver_config(config), _snapshot_hook(ctx, spec, ""))
    ctx.add(write_csv(records_frame(state.records), ctx.path("iterations.csv")))
    _final_surface(ctx, state, spec, "final.vtk")
    diag = state.diagnostics_history[-1]
    ctx.summary.update({
        "iterations": state.k,
        "converged": state.converged,
        "energy": state.energy.total,
        "mean_curv_1": diag.mean_curv_1,
        "mean_curv_2": diag.mean_curv_2,
        "q_sym": diag.q_sym,
        "dissipation": state.dissipation,
    })


def _sweep(ctx: RunContext, parameter: str) -> tuple[list, list[FlowState], ProblemSpec]:
    config = ctx.config
    mesh = build_mesh(config)
    ctx.add(write_mesh(mesh, ctx.path("mesh.vtk")))
    spec = build_problem(config, mesh)
    cfg = solver_config(config)
    initial = initial_fields(config, spec)
    values = list(config.sweep_values)
    if config.warm_start:
        states = continuation_sweep(parameter, values, spec, cfg, initial)
    else:
        states = independent_sweep(parameter, values, spec, cfg, initial, config.workers)

    rows = [_point_row(parameter, v, s) for v, s in zip(values, states)]
    ctx.add(write_csv(pd.DataFrame(rows), ctx.path("sweep.csv")))
    frames = [records_frame(s.records, **{parameter: v}) for v, s in zip(values, states)]
    ctx.add(write_csv(pd.concat(frames, ignore_index=True), ctx.path("iterations.csv")))
    for v, s in zip(values, states):
        _final_surface(ctx, s, spec.with_parameter(parameter, v), f"{parameter}_{v:+.4f}.vtk")
    return values, states, spec


def run_flat_disc_sweep(ctx: RunContext) -> None:
    values, states, _ = _sweep(ctx, "theta")
    ctx.summary["theta_transition"] = transition_point(
        values, states, ctx.config.transition_threshold)
    ctx.summary["points"] = len(values)


def run_curvature_inversion(ctx: RunContext) -> None:
    values, states, _ = _sweep(ctx, "alpha")
    by_value = {round(v, 9): s for v, s in zip(values, states)}
    if 0.0 in by_value:
        ctx.summary["hessian_norm_at_zero"] = hessian_norm(by_value[0.0].w)
    if 1.0 in by_value and -1.0 in by_value:
        up, down = by_value[1.0].w.values, by_value[-1.0].w.values
        scale = max(float(np.max(np.abs(up))), 1e-300)
        ctx.summary["reflection_error"] = float(np.max(np.abs(up + down)) / scale)


def _run_variant(ctx: RunContext, crease_kind: str,
                 label: str) -> tuple[FlowState, ProblemSpec, np.ndarray]:
    """Run one crease variant; also returns the center indentation w0(0) - wk(0) per iterate."""
    config = ctx.config
    if crease_kind == "straight" and config.kind == "bilayer_fold":
        crease = straight_crease(_grid_column_near(config, config.half_width / 3.0),
                                 config.half_width)
    else:
        crease = build_crease(config, crease_kind)
    mesh = build_mesh(config, crease)
    ctx.add(write_mesh(mesh, ctx.path(f"mesh_{label}.vtk")))
    spec = build_problem(config, mesh)
    u0, w0 = initial_fields(config, spec)
    center = mesh.nearest_node((0.0, 0.0))
    heights = [w0.values[center]]
    snapshot = _snapshot_hook(ctx, spec, f"{label}_")

    def on_step(state: FlowState) -> None:
        heights.append(state.w.values[center])
        snapshot(state)

    log.info("Running %s variant '%s'", config.kind, label)
    state = run_flow(u0, w0, spec, solver_config(config), on_step)
    _final_surface(ctx, state, spec, f"{label}_final.vtk")
    return state, spec, heights[0] - np.array(heights)


def _grid_column_near(config: ExperimentConfig, x: float) -> float:
    n = max(1, int(np.ceil(2.0 * config.half_width / config.h - 1e-9)))
    s = 2.0 * config.half_width / n
    return -config.half_width + s * round((x + config.half_width) / s)


def run_cardboard(ctx: RunContext) -> None:
    config = ctx.config
    variants = [(config.crease, config.crease)]
    if config.compare and config.crease != "none":
        variants.append(("none", "none"))
    frames, curves = [], {}
    for kind, label in variants:
        state, _, depth = _run_variant(ctx, kind, label)
        frame = records_frame(state.records, run=label)
        frame["indentation"] = depth[1:]
        frames.append(frame)
        elastic = np.array([e.elastic for e in state.energy_history])
        curves[label] = (depth, elastic)
        ctx.summary[f"{label}_iterations"] = state.k
        ctx.summary[f"{label}_max_elastic"] = float(elastic.max())
        ctx.summary[f"{label}_max_indentation"] = float(depth.max())
        ctx.summary[f"{label}_barrier"] = _has_interior_maximum(elastic)
    ctx.add(write_csv(pd.concat(frames, ignore_index=True), ctx.path("iterations.csv")))
    if len(curves) == 2:
        ctx.summary["crease_below"] = energy_below(*curves[config.crease], *curves["none"])


def run_bilayer_fold(ctx: RunContext) -> None:
    config = ctx.config
    variants = [config.crease]
    if config.compare and config.crease != "straight":
        variants.append("straight")
    frames = []
    for kind in variants:
        state, _, _ = _run_variant(ctx, kind, kind)
        frames.append(records_frame(state.records, run=kind))
        ctx.summary[f"{kind}_right_max_abs_w"] = right_subdomain_max(state)
        ctx.summary[f"{kind}_iterations"] = state.k
    ctx.add(write_csv(pd.concat(frames, ignore_index=True), ctx.path("iterations.csv")))


# ---- Registry ----

EXPERIMENT_REGISTRY = {
    "flat_disc_sweep": {"handler": run_flat_disc_sweep, "label": "θ sweep on the flat disc"},
    "curvature_inversion": {"handler": run_curvature_inversion, "label": "α continuation with pinned center"},
    "cardboard": {"handler": run_cardboard, "label": "indented cardboard with and without crease"},
    "bilayer_fold": {"handler": run_bilayer_fold, "label": "bilayer folding along a curved crease"},
    "single_run": {"handler": run_single, "label": "one gradient-flow run"},
}


def run_experiment(config: ExperimentConfig) -> int:
    """Run one configured experiment; returns the process exit status."""
    entry = EXPERIMENT_REGISTRY[config.kind]
    ctx = RunContext(config, config.output_dir)
    os.makedirs(ctx.directory, exist_ok=True)
    log.info("Starting %s (%s) -> %s", config.kind, entry["label"], ctx.directory)

    status, reason, code = "ok", None, 0
    try:
        entry["handler"](ctx)
    except MeshError as e:
        log.error("Mesh rejected: %s", e)
        status, reason, code = "invalid", str(e), 1
    except (FlowAbort, AssemblyError) as e:
        log.error("Solver aborted: %s", e)
        status, reason, code = "aborted", str(e), 2

    write_manifest(ctx.directory, config.config_hash(), config.kind, status,
                   ctx.outputs, ctx.summary, reason)
    log.info("Finished %s with status %s", config.kind, status)
    return code
