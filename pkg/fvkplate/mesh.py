"""Structured triangulations of squares and discs with crease-aware topology.

Square meshes are uniform grids with one diagonal per cell; a crease given as a
polyline x1 = g(x2) is threaded through one grid node per row. Disc meshes are
concentric rings of 6j nodes around a central node at the origin.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import MeshError

log = logging.getLogger(__name__)

CREASE_KINDS = ("none", "straight", "arc")


# ---- Crease geometry ----

@dataclass(frozen=True)
class CreaseSpec:
    kind: str = "none"
    polyline: tuple[tuple[float, float], ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in CREASE_KINDS:
            raise MeshError(f"unknown crease kind {self.kind!r}")
        if self.kind == "none":
            if self.polyline:
                raise MeshError("crease kind 'none' takes no polyline")
            return
        if len(self.polyline) < 2:
            raise MeshError("crease polyline needs at least two points")
        pts = np.asarray(self.polyline, dtype=float)
        if np.any(np.linalg.norm(np.diff(pts, axis=0), axis=1) == 0.0):
            raise MeshError("consecutive crease points coincide")

    @property
    def points(self) -> np.ndarray:
        return np.asarray(self.polyline, dtype=float).reshape(-1, 2)


def straight_crease(x1: float = 0.0, half_width: float = 1.0,
                    center: tuple[float, float] = (0.0, 0.0)) -> CreaseSpec:
    cx, cy = center
    return CreaseSpec("straight", ((cx + x1, cy - half_width), (cx + x1, cy + half_width)))


def arc_crease(half_width: float = 1.0, samples: int = 401,
               center: tuple[float, float] = (0.0, 0.0)) -> CreaseSpec:
    """C(t) = (sin(pi t)/6 + 1/3, t) for t in [-1, 1], scaled to the square."""
    t = np.linspace(-1.0, 1.0, samples)
    x = (np.sin(np.pi * t) / 6.0 + 1.0 / 3.0) * half_width + center[0]
    y = t * half_width + center[1]
    return CreaseSpec("arc", tuple(zip(x.tolist(), y.tolist())))


# ---- Triangulation ----

@dataclass(frozen=True, eq=False)
class Triangulation:
    nodes: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    edge_triangles: np.ndarray
    triangle_edges: np.ndarray
    midpoints: np.ndarray
    normals: np.ndarray
    tangents: np.ndarray
    areas: np.ndarray
    boundary_nodes: np.ndarray
    subdomain: np.ndarray
    crease_nodes: np.ndarray
    h: float
    crease: CreaseSpec = field(default_factory=CreaseSpec)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def has_crease(self) -> bool:
        return len(self.crease_nodes) > 0

    @property
    def boundary_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_triangles[:, 1] < 0)

    @property
    def crease_edges(self) -> np.ndarray:
        if not self.has_crease:
            return np.empty(0, dtype=int)
        on_crease = np.isin(self.edges, self.crease_nodes).all(axis=1)
        sides = self.edge_triangles
        interior = sides[:, 1] >= 0
        differ = np.zeros(self.n_edges, dtype=bool)
        differ[interior] = (self.subdomain[sides[interior, 0]]
                            != self.subdomain[sides[interior, 1]])
        return np.flatnonzero(on_crease & differ)

    @property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = True
        return mask

    def crease_position(self) -> np.ndarray:
        """Map node -> index in crease_nodes, -1 off the crease."""
        pos = np.full(self.n_nodes, -1, dtype=int)
        pos[self.crease_nodes] = np.arange(len(self.crease_nodes))
        return pos

    def nearest_node(self, point: tuple[float, float]) -> int:
        return int(np.argmin(np.linalg.norm(self.nodes - np.asarray(point), axis=1)))

    def boundary_area(self) -> float:
        """Area enclosed by the boundary polygon (shoelace over oriented boundary edges)."""
        e = self.edges[self.boundary_edges]
        p, q = self.nodes[e[:, 0]], self.nodes[e[:, 1]]
        return 0.5 * float(np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]))


def signed_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = nodes[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def build_triangulation(nodes: np.ndarray, triangles: np.ndarray,
                        subdomain: np.ndarray | None = None,
                        crease_nodes: np.ndarray | None = None,
                        crease: CreaseSpec | None = None) -> Triangulation:
    nodes = np.ascontiguousarray(nodes, dtype=float)
    triangles = np.array(triangles, dtype=int).reshape(-1, 3)
    if len(triangles) == 0:
        raise MeshError("mesh has no triangles")
    if triangles.min() < 0 or triangles.max() >= len(nodes):
        raise MeshError("triangle references a missing node")

    p = nodes[triangles]
    lengths = np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2)
    h = float(lengths.max())

    area = signed_areas(nodes, triangles)
    if np.any(np.abs(area) < 1e-14 * h * h):
        bad = int(np.argmin(np.abs(area)))
        raise MeshError(f"degenerate triangle {bad} with area {area[bad]:.3e}")
    flip = area < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    area = np.abs(area)

    nt = len(triangles)
    # local edge k is opposite vertex k
    local = np.concatenate([triangles[:, [1, 2]], triangles[:, [2, 0]], triangles[:, [0, 1]]])
    keys = np.sort(local, axis=1)
    pairs, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=len(pairs))
    if np.any(counts > 2):
        raise MeshError("non-manifold edge shared by more than two triangles")

    triangle_edges = inverse.reshape(3, nt).T.copy()
    owner = np.tile(np.arange(nt), 3)
    order = np.lexsort((owner, inverse))
    sorted_e, sorted_t = inverse[order], owner[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = sorted_e[1:] != sorted_e[:-1]
    edge_triangles = np.full((len(pairs), 2), -1, dtype=int)
    edge_triangles[sorted_e[first], 0] = sorted_t[first]
    edge_triangles[sorted_e[~first], 1] = sorted_t[~first]

    # normal points out of the lower-indexed triangle; tangent = rot90(normal)
    a, b = nodes[pairs[:, 0]], nodes[pairs[:, 1]]
    d = b - a
    length = np.linalg.norm(d, axis=1)
    normals = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
    centroid = nodes[triangles[edge_triangles[:, 0]]].mean(axis=1)
    outward = np.einsum("ij,ij->i", 0.5 * (a + b) - centroid, normals) > 0
    normals[~outward] *= -1.0
    tangents = np.column_stack([-normals[:, 1], normals[:, 0]])
    swap = np.einsum("ij,ij->i", d, tangents) < 0
    edges = pairs.copy()
    edges[swap] = edges[swap][:, ::-1]
    midpoints = 0.5 * (nodes[edges[:, 0]] + nodes[edges[:, 1]])

    boundary = edge_triangles[:, 1] < 0
    boundary_nodes = np.unique(edges[boundary])

    if subdomain is None:
        subdomain = np.ones(nt, dtype=int)
    subdomain = np.asarray(subdomain, dtype=int)
    crease_nodes = np.asarray([] if crease_nodes is None else crease_nodes, dtype=int)

    mesh = Triangulation(
        nodes=nodes,
        triangles=triangles,
        edges=edges,
        edge_triangles=edge_triangles,
        triangle_edges=triangle_edges,
        midpoints=midpoints,
        normals=normals,
        tangents=tangents,
        areas=area,
        boundary_nodes=boundary_nodes,
        subdomain=subdomain,
        crease_nodes=crease_nodes,
        h=h,
        crease=crease or CreaseSpec(),
    )
    if mesh.has_crease:
        check_crease_topology(mesh)
    return mesh


def edge_frames(mesh: Triangulation) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return mesh.midpoints, mesh.normals, mesh.tangents


def check_crease_topology(mesh: Triangulation) -> None:
    ends = mesh.crease_nodes[[0, -1]]
    if not np.all(np.isin(ends, mesh.boundary_nodes)):
        raise MeshError("crease endpoints must lie on the boundary")
    if set(np.unique(mesh.subdomain)) != {1, 2}:
        raise MeshError("crease does not split the domain into two subdomains")

    # triangle adjacency without crossing crease edges
    interior = np.flatnonzero(mesh.edge_triangles[:, 1] >= 0)
    interior = np.setdiff1d(interior, mesh.crease_edges)
    i, j = mesh.edge_triangles[interior].T
    graph = coo_matrix((np.ones(len(i)), (i, j)), shape=(mesh.n_triangles,) * 2)
    n_comp, labels = connected_components(graph, directed=False)
    if n_comp != 2:
        raise MeshError(f"crease splits the mesh into {n_comp} components, expected 2")
    for comp in range(2):
        tags = np.unique(mesh.subdomain[labels == comp])
        if len(tags) != 1:
            raise MeshError("subdomain tags do not match the crease components")


# ---- Square ----

def make_square_mesh(half_width: float, h: float, crease: CreaseSpec | None = None,
                     center: tuple[float, float] = (0.0, 0.0)) -> Triangulation:
    """Uniform grid on center + [-half_width, half_width]^2 with grid spacing <= h."""
    if not h > 0 or not half_width > 0:
        raise MeshError(f"half_width and h must be positive, got {half_width}, {h}")
    crease = crease or CreaseSpec()
    n = max(1, math.ceil(2.0 * half_width / h - 1e-9))
    s = 2.0 * half_width / n
    cx, cy = center
    xs = cx - half_width + s * np.arange(n + 1)
    ys = cy - half_width + s * np.arange(n + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def node(i, j):
        return j * (n + 1) + i

    flipped = np.zeros((n, n), dtype=bool)  # [j, i]
    crease_nodes = None
    subdomain = None

    if crease.kind != "none":
        pts = crease.points
        if pts[0, 1] > pts[-1, 1]:
            pts = pts[::-1]
        if not np.all(np.diff(pts[:, 1]) > 0):
            raise MeshError("crease polyline must be a graph x1 = g(x2) over the square")
        if abs(pts[0, 1] - ys[0]) > 1e-9 * half_width or abs(pts[-1, 1] - ys[-1]) > 1e-9 * half_width:
            raise MeshError("crease polyline must run from the bottom to the top edge")
        target = np.interp(ys, pts[:, 1], pts[:, 0])
        cols = np.rint((target - xs[0]) / s).astype(int)
        if np.any(cols <= 0) or np.any(cols >= n):
            raise MeshError(
                f"crease polyline not representable on the grid: it reaches a side at h={s:g}"
            )
        if crease.kind == "straight":
            off = np.abs(target - xs[cols])
            if np.any(off > 1e-9 * s):
                raise MeshError(
                    f"straight crease at x1={target[0]:g} does not coincide with a grid column (spacing {s:g})"
                )
        jumps = np.diff(cols)
        if np.any(np.abs(jumps) > 1):
            raise MeshError("crease polyline not representable on the grid: slope too large for h")
        crease_nodes = np.array([node(cols[j], j) for j in range(n + 1)])
        nodes[crease_nodes, 0] = target
        for j in np.flatnonzero(jumps == -1):
            flipped[j, cols[j] - 1] = True

    jj, ii = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    a = node(ii, jj)
    b = node(ii + 1, jj)
    c = node(ii + 1, jj + 1)
    d = node(ii, jj + 1)
    regular = ~flipped
    tris = np.concatenate([
        np.stack([a[regular], b[regular], c[regular]], axis=1),
        np.stack([a[regular], c[regular], d[regular]], axis=1),
        np.stack([a[flipped], b[flipped], d[flipped]], axis=1),
        np.stack([b[flipped], c[flipped], d[flipped]], axis=1),
    ])
    # stable ordering: cell-major, as the grid is walked
    cell = np.concatenate([
        (jj * n + ii)[regular], (jj * n + ii)[regular],
        (jj * n + ii)[flipped], (jj * n + ii)[flipped],
    ])
    tris = tris[np.argsort(cell, kind="stable")]

    if crease_nodes is not None:
        if np.any(signed_areas(nodes, tris) <= 0):
            raise MeshError("moving crease nodes onto the polyline inverts elements; refine h")
        cp = nodes[crease_nodes]
        centroid = nodes[tris].mean(axis=1)
        g = np.interp(centroid[:, 1], cp[:, 1], cp[:, 0])
        subdomain = np.where(centroid[:, 0] < g, 1, 2)

    mesh = build_triangulation(nodes, tris, subdomain, crease_nodes, crease)
    log.info("Square mesh: %d nodes, %d triangles, h=%.4g, crease=%s",
             mesh.n_nodes, mesh.n_triangles, mesh.h, crease.kind)
    return mesh


# ---- Disc ----

def _ring_mesh(radius: float, m: int) -> tuple[np.ndarray, np.ndarray]:
    coords = [(0.0, 0.0)]
    rings: list[np.ndarray] = [np.array([0])]
    for j in range(1, m + 1):
        count = 6 * j
        phi = 2.0 * np.pi * np.arange(count) / count
        r = radius * j / m
        start = len(coords)
        coords.extend(zip(r * np.cos(phi), r * np.sin(phi)))
        rings.append(np.arange(start, start + count))

    tris = []
    first = rings[1]
    for k in range(6):
        tris.append((0, first[k], first[(k + 1) % 6]))
    for j in range(1, m):
        inner, outer = rings[j], rings[j + 1]
        ni, no = len(inner), len(outer)
        pi = po = 0
        # angles compared exactly as fractions pi/ni vs po/no
        while pi < ni or po < no:
            advance_outer = pi == ni or (po < no and (po + 1) * ni <= (pi + 1) * no)
            if advance_outer:
                tris.append((inner[pi % ni], outer[po % no], outer[(po + 1) % no]))
                po += 1
            else:
                tris.append((inner[pi % ni], outer[po % no], inner[(pi + 1) % ni]))
                pi += 1
    return np.asarray(coords), np.asarray(tris)


def make_disc_mesh(radius: float, h: float) -> Triangulation:
    """Polygonal disc of the given radius with max element diameter <= h."""
    if not h > 0 or not radius > 0:
        raise MeshError(f"radius and h must be positive, got {radius}, {h}")
    m = max(1, math.ceil(1.8 * radius / h))
    while True:
        nodes, tris = _ring_mesh(radius, m)
        mesh = build_triangulation(nodes, tris)
        if mesh.h <= h * (1.0 + 1e-12):
            break
        m += 1
    log.info("Disc mesh: %d rings, %d nodes, %d triangles, h=%.4g",
             m, mesh.n_nodes, mesh.n_triangles, mesh.h)
    return mesh
