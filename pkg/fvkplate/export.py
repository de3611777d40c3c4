"""VTK mesh and surface files, CSV sinks and the run manifest.

VTK files are ASCII unstructured grids of triangles written through meshio;
floats are written in shortest round-trip form so a read-back is exact.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict
from datetime import datetime

import meshio
import numpy as np
import pandas as pd
import scipy

from . import __version__
from .energy import ProblemSpec, bending_density
from .flow import FlowState, IterationRecord
from .mesh import Triangulation

log = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


# ---- VTK ----

def write_vtk(path: str, points: np.ndarray, triangles: np.ndarray, label: str,
              point_data: dict[str, np.ndarray] | None = None,
              cell_data: dict[str, np.ndarray] | None = None) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    points = np.asarray(points, dtype=float)
    if points.shape[1] == 2:
        points = np.column_stack([points, np.zeros(len(points))])
    mesh = meshio.Mesh(
        points,
        [("triangle", np.asarray(triangles, dtype=int))],
        point_data={name: np.asarray(v) for name, v in (point_data or {}).items()},
        cell_data={name: [np.asarray(v)] for name, v in (cell_data or {}).items()},
    )
    meshio.write(path, mesh, file_format="vtk", binary=False)
    log.info("Saved %s to %s", label, path)
    return path


def read_vtk(path: str) -> dict:
    mesh = meshio.read(path, file_format="vtk")
    return {
        "points": mesh.points,
        "triangles": mesh.cells_dict["triangle"],
        "point_data": dict(mesh.point_data),
        "cell_data": {name: blocks[0] for name, blocks in mesh.cell_data.items()},
    }


def write_mesh(mesh: Triangulation, path: str) -> str:
    boundary = mesh.boundary_mask().astype(int)
    crease = np.zeros(mesh.n_nodes, dtype=int)
    crease[mesh.crease_nodes] = 1
    return write_vtk(
        path, mesh.nodes, mesh.triangles, f"mesh: h={mesh.h:.6g} crease={mesh.crease.kind}",
        point_data={"boundary": boundary, "crease": crease},
        cell_data={"subdomain": mesh.subdomain.astype(int)},
    )


def export_surface(state: FlowState, spec: ProblemSpec, path: str,
                   displacement_scale: float = 1.0, height_scale: float = 1.0) -> str:
    """Deformed surface (x + s u, w) with vertical/in-plane channels and bending density."""
    mesh = spec.mesh
    u = state.u.values
    points = np.column_stack([
        mesh.nodes + displacement_scale * u,
        height_scale * state.w.values,
    ])
    return write_vtk(
        path, points, mesh.triangles, f"surface: k={state.k} tau={state.tau:.6g}",
        point_data={
            "w": state.w.values,
            "vertical_magnitude": np.abs(state.w.values),
            "u1": u[:, 0],
            "u2": u[:, 1],
        },
        cell_data={
            "bending_density": bending_density(state.w, spec),
            "subdomain": mesh.subdomain.astype(int),
        },
    )


# ---- CSV ----

def records_frame(records: list[IterationRecord], **columns) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(r) for r in records])
    for name, value in columns.items():
        frame.insert(0, name, value)
    return frame


def write_csv(frame: pd.DataFrame, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    log.info("Saved %d rows to %s", len(frame), path)
    return path


def read_csv(path: str) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


# ---- Manifest ----

def hash_outputs(paths: list[str]) -> str:
    """SHA-256 over the output files in sorted order; VTK header lines are skipped."""
    digest = hashlib.sha256()
    for path in sorted(paths):
        with open(path, "rb") as f:
            data = f.read()
        if path.endswith(".vtk"):
            # second line names the writer and its version
            head, _, rest = data.partition(b"\n")
            _, _, rest = rest.partition(b"\n")
            data = head + b"\n" + rest
        digest.update(os.path.basename(path).encode("utf-8"))
        digest.update(data)
    return digest.hexdigest()


def write_manifest(directory: str, config_hash: str, kind: str, status: str,
                   outputs: list[str], summary: dict | None = None,
                   reason: str | None = None) -> str:
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "kind": kind,
        "status": status,
        "reason": reason,
        "config_hash": config_hash,
        "output_hash": hash_outputs(outputs),
        "outputs": sorted(os.path.relpath(p, directory) for p in outputs),
        "summary": summary or {},
        "versions": {
            "fvkplate": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "meshio": meshio.__version__,
        },
        "created": datetime.now().isoformat(timespec="seconds"),
    }
    path = os.path.join(directory, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, ensure_ascii=False, default=_jsonable)
    log.info("Saved manifest to %s", path)
    return path


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")
