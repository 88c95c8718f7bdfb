"""Triangulation of the annulus between an outer and an inner closed curve.

Node numbering is fixed by construction: the outer loop (Sigma) comes first,
then the inner loop (Gamma), then interior nodes.  Both loops are stored in
counterclockwise order, matching the polylines they were built from.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

from .geometry import Polyline, points_in_polygon, resample_polyline

__all__ = [
    "MeshError",
    "NodeMarker",
    "AnnularMesh",
    "triangulate_annulus",
    "deform",
    "min_signed_area_ratio",
    "write_mesh",
    "read_mesh",
    "write_vtk",
]


class MeshError(RuntimeError):
    pass


class NodeMarker(enum.IntEnum):
    INTERIOR = 0
    ON_SIGMA = 1
    ON_GAMMA = 2


def unique_edges(tri: np.ndarray) -> np.ndarray:
    """Sorted unique undirected edges of a triangle list, shape (E, 2)."""
    e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]).astype(np.int64)
    e.sort(axis=1)
    n = int(e.max()) + 1
    key = np.unique(e[:, 0] * n + e[:, 1])
    return np.stack([key // n, key % n], axis=1)


def _edge_counts(tri: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]).astype(np.int64)
    e.sort(axis=1)
    n = int(e.max()) + 1
    key, counts = np.unique(e[:, 0] * n + e[:, 1], return_counts=True)
    return np.stack([key // n, key % n], axis=1), counts


def _signed_areas(nodes: np.ndarray, tris: np.ndarray) -> np.ndarray:
    a, b, c = nodes[tris[:, 0]], nodes[tris[:, 1]], nodes[tris[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


@dataclass(frozen=True, eq=False)
class AnnularMesh:
    nodes: np.ndarray
    triangles: np.ndarray
    n_sigma: int
    n_gamma: int
    h_target: float
    gamma_corners: tuple[int, ...] = ()

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def sigma_loop(self) -> np.ndarray:
        return np.arange(self.n_sigma)

    @property
    def gamma_loop(self) -> np.ndarray:
        return self.n_sigma + np.arange(self.n_gamma)

    def loop(self, which: str) -> np.ndarray:
        if which.lower() in ("sigma", "outer"):
            return self.sigma_loop
        if which.lower() in ("gamma", "inner"):
            return self.gamma_loop
        raise ValueError(f"unknown boundary loop {which!r}")

    @staticmethod
    def _loop_edges(loop: np.ndarray) -> np.ndarray:
        return np.stack([loop, np.roll(loop, -1)], axis=1)

    @property
    def sigma_edges(self) -> np.ndarray:
        return self._loop_edges(self.sigma_loop)

    @property
    def gamma_edges(self) -> np.ndarray:
        return self._loop_edges(self.gamma_loop)

    @property
    def node_marker(self) -> np.ndarray:
        m = np.full(self.n_nodes, NodeMarker.INTERIOR, dtype=np.int8)
        m[: self.n_sigma] = NodeMarker.ON_SIGMA
        m[self.n_sigma : self.n_sigma + self.n_gamma] = NodeMarker.ON_GAMMA
        return m

    @property
    def areas(self) -> np.ndarray:
        return _signed_areas(self.nodes, self.triangles)

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    def sigma_polyline(self) -> Polyline:
        return Polyline(self.nodes[self.sigma_loop], check=False)

    def gamma_polyline(self, check: bool = False) -> Polyline:
        return Polyline(self.nodes[self.gamma_loop], corners=self.gamma_corners, check=check)

    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted, as an (E, 2) array."""
        return unique_edges(self.triangles)

    def min_angle(self) -> float:
        """Smallest interior angle over all triangles, in degrees."""
        p = self.nodes[self.triangles]
        angles = []
        for i in range(3):
            u = p[:, (i + 1) % 3] - p[:, i]
            v = p[:, (i + 2) % 3] - p[:, i]
            cosang = np.einsum("ij,ij->i", u, v) / (np.hypot(*u.T) * np.hypot(*v.T))
            angles.append(np.degrees(np.arccos(np.clip(cosang, -1, 1))))
        return float(np.min(angles))

    def check(self) -> None:
        """Raise MeshError if any structural invariant fails."""
        areas = self.areas
        if areas.min() <= 0:
            raise MeshError(f"triangle {int(np.argmin(areas))} has non-positive area {areas.min():.3e}")
        uniq, counts = _edge_counts(self.triangles)
        boundary = {tuple(x) for x in uniq[counts == 1].tolist()}
        loops = np.concatenate([self.sigma_edges, self.gamma_edges])
        loops.sort(axis=1)
        expected = {tuple(x) for x in loops.tolist()}
        if boundary != expected:
            missing = sorted(expected - boundary)[:5]
            extra = sorted(boundary - expected)[:5]
            raise MeshError(f"boundary edges do not match the two loops (missing {missing}, extra {extra})")
        if np.any(counts > 2):
            raise MeshError("an edge is shared by more than two triangles")


# ---------------------------------------------------------------------------
# meshing
# ---------------------------------------------------------------------------


def _hex_lattice(lo: np.ndarray, hi: np.ndarray, h: float, angle: float, offset: np.ndarray) -> np.ndarray:
    center = 0.5 * (lo + hi)
    r = 0.5 * float(np.hypot(*(hi - lo))) + 2 * h
    dy = h * np.sqrt(3) / 2
    ny = int(np.ceil(r / dy))
    nx = int(np.ceil(r / h)) + 1
    j, i = np.mgrid[-ny : ny + 1, -nx : nx + 1]
    x = (i + 0.5 * (j % 2)) * h
    y = j * dy
    pts = np.stack([x.ravel(), y.ravel()], axis=1) + offset * h
    c, s = np.cos(angle), np.sin(angle)
    pts = pts @ np.array([[c, s], [-s, c]])
    return pts + center


def _in_annulus(xy: np.ndarray, outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    return points_in_polygon(xy, outer) & ~points_in_polygon(xy, inner)


def _delaunay(points: np.ndarray, n_boundary: int, outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    tri = Delaunay(points, qhull_options="Qbb Qc Qz Q12").simplices
    cent = points[tri].mean(axis=1)
    keep = _in_annulus(cent, outer, inner)
    tri = tri[keep]
    # a triangle spanning three nodes of one loop may lie outside the region
    # even if its centroid test is marginal; the conformity check catches it
    areas = _signed_areas(points, tri)
    tri = np.where((areas < 0)[:, None], tri[:, [0, 2, 1]], tri)
    return tri


def _missing_segments(tri: np.ndarray, segments: np.ndarray) -> np.ndarray:
    have = {tuple(x) for x in unique_edges(tri).tolist()}
    s = np.sort(segments, axis=1)
    mask = np.array([tuple(x) not in have for x in s.tolist()])
    return segments[mask]


def triangulate_annulus(
    outer: Polyline,
    inner: Polyline,
    h: float,
    *,
    smoothing_steps: int = 6,
    seed: int | None = None,
) -> AnnularMesh:
    """Conforming triangulation of the region between ``outer`` and ``inner``.

    Both curves are first resampled to spacing about ``h``; those vertices
    become the boundary nodes.  Interior nodes start on a hexagonal lattice
    (rotated and shifted when ``seed`` is given) and are relaxed by a few
    rounds of Laplacian smoothing with re-triangulation.
    """
    if not h > 0:
        raise MeshError("mesh size must be positive")
    sig = resample_polyline(outer, h)
    gam = resample_polyline(inner, h)
    ps, pg = sig.points, gam.points

    if not np.all(points_in_polygon(pg, ps)):
        raise MeshError("inclusion touches outer boundary (inner curve not inside outer)")
    clearance = min(float(sig.distance(pg).min()), float(gam.distance(ps).min()))
    if clearance < h:
        raise MeshError(f"inclusion touches outer boundary: clearance {clearance:.4g} < h = {h:.4g}")

    rng = np.random.default_rng(seed) if seed is not None else None
    angle = float(rng.uniform(0, np.pi / 3)) if rng is not None else 0.0
    offset = rng.uniform(0, 1, size=2) if rng is not None else np.zeros(2)
    lo, hi = ps.min(axis=0), ps.max(axis=0)
    cand = _hex_lattice(lo, hi, h, angle, offset)
    cand = cand[_in_annulus(cand, ps, pg)]
    dist = np.minimum(sig.distance(cand), gam.distance(cand))
    interior = cand[dist > 0.6 * h]

    boundary = np.vstack([ps, pg])
    nb = len(boundary)
    segments = np.concatenate(
        [
            AnnularMesh._loop_edges(np.arange(len(ps))),
            AnnularMesh._loop_edges(len(ps) + np.arange(len(pg))),
        ]
    )

    for _ in range(smoothing_steps):
        pts = np.vstack([boundary, interior])
        tri = _delaunay(pts, nb, ps, pg)
        interior = _laplace_smooth(pts, tri, nb)[nb:]
        ok = _in_annulus(interior, ps, pg)
        d = np.minimum(sig.distance(interior), gam.distance(interior))
        interior = interior[ok & (d > 0.3 * h)]

    for _ in range(10):
        pts = np.vstack([boundary, interior])
        tri = _delaunay(pts, nb, ps, pg)
        missing = _missing_segments(tri, segments)
        if len(missing) == 0:
            break
        # drop interior points encroaching on the diametral circle of a
        # missing boundary segment
        mid = 0.5 * (pts[missing[:, 0]] + pts[missing[:, 1]])
        rad = 0.5 * np.hypot(*(pts[missing[:, 0]] - pts[missing[:, 1]]).T)
        d = np.hypot(interior[:, None, 0] - mid[None, :, 0], interior[:, None, 1] - mid[None, :, 1])
        enc = np.any(d <= 1.05 * rad[None, :], axis=1)
        if not enc.any():
            raise MeshError(f"could not recover boundary segments {missing[:5].tolist()}")
        interior = interior[~enc]
    else:
        raise MeshError("boundary recovery did not converge")

    # drop unused interior nodes and renumber
    used = np.zeros(len(pts), dtype=bool)
    used[tri.ravel()] = True
    if not used[:nb].all():
        raise MeshError("a boundary node is not attached to any triangle")
    remap = np.cumsum(used) - 1
    nodes = pts[used]
    tri = remap[tri]
    order = np.lexsort((tri[:, 2], tri[:, 1], tri[:, 0]))
    mesh = AnnularMesh(
        nodes=nodes,
        triangles=tri[order].astype(np.int64),
        n_sigma=len(ps),
        n_gamma=len(pg),
        h_target=float(h),
        gamma_corners=gam.corners,
    )
    mesh.nodes.setflags(write=False)
    mesh.triangles.setflags(write=False)
    mesh.check()
    return mesh


def _laplace_smooth(pts: np.ndarray, tri: np.ndarray, n_fixed: int) -> np.ndarray:
    e = unique_edges(tri)
    n = len(pts)
    acc = np.zeros_like(pts)
    deg = np.zeros(n)
    np.add.at(acc, e[:, 0], pts[e[:, 1]])
    np.add.at(acc, e[:, 1], pts[e[:, 0]])
    np.add.at(deg, e[:, 0], 1)
    np.add.at(deg, e[:, 1], 1)
    out = pts.copy()
    free = np.arange(n) >= n_fixed
    free &= deg > 0
    out[free] = acc[free] / deg[free, None]
    return out


# ---------------------------------------------------------------------------
# deformation
# ---------------------------------------------------------------------------


def _check_field(m: AnnularMesh, V) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    if V.shape != (m.n_nodes, 2):
        raise ValueError(f"deformation field must have shape ({m.n_nodes}, 2), got {V.shape}")
    on_sigma = np.abs(V[: m.n_sigma]).max() if m.n_sigma else 0.0
    if on_sigma > 1e-12:
        raise ValueError(f"deformation field must vanish on Sigma (max |V| there = {on_sigma:.3e})")
    return V


def deform(m: AnnularMesh, V, t: float) -> AnnularMesh:
    """Move every node x to x + t V(x); connectivity and tags are unchanged."""
    V = _check_field(m, V)
    nodes = m.nodes + t * V
    nodes[: m.n_sigma] = m.nodes[: m.n_sigma]
    nodes.setflags(write=False)
    return replace(m, nodes=nodes)


def min_signed_area_ratio(m: AnnularMesh, V, t: float) -> float:
    """Smallest ratio of triangle area after the move to area before."""
    V = _check_field(m, V)
    before = m.areas
    after = _signed_areas(m.nodes + t * V, m.triangles)
    return float((after / before).min())


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

MESH_HEADER = "# annmesh v1"


def write_mesh(path, m: AnnularMesh) -> None:
    lines = [MESH_HEADER, f"h {m.h_target!r}", str(m.n_nodes)]
    marker = m.node_marker
    lines += [f"{x!r} {y!r} {int(k)}" for (x, y), k in zip(m.nodes.tolist(), marker)]
    lines.append(str(len(m.triangles)))
    lines += [f"{i} {j} {k}" for i, j, k in m.triangles.tolist()]
    lines.append(f"sigma {len(m.sigma_edges)}")
    lines += [f"{i} {j}" for i, j in m.sigma_edges.tolist()]
    lines.append(f"gamma {len(m.gamma_edges)}")
    lines += [f"{i} {j}" for i, j in m.gamma_edges.tolist()]
    if m.gamma_corners:
        lines.append("corners " + " ".join(map(str, m.gamma_corners)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> AnnularMesh:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0] != MESH_HEADER:
        raise MeshError(f"{path}: missing header {MESH_HEADER!r}")
    pos = 1
    h = float(lines[pos].split()[1])
    pos += 1
    nn = int(lines[pos])
    pos += 1
    raw = np.array([ln.split() for ln in lines[pos : pos + nn]], dtype=float)
    pos += nn
    nodes, marker = raw[:, :2], raw[:, 2].astype(int)
    nt = int(lines[pos])
    pos += 1
    tris = np.array([ln.split() for ln in lines[pos : pos + nt]], dtype=np.int64)
    pos += nt
    ns = int(lines[pos].split()[1])
    pos += 1 + ns
    ng = int(lines[pos].split()[1])
    pos += 1 + ng
    corners: tuple[int, ...] = ()
    if pos < len(lines) and lines[pos].startswith("corners"):
        corners = tuple(int(c) for c in lines[pos].split()[1:])
    if np.count_nonzero(marker == NodeMarker.ON_SIGMA) != ns or np.count_nonzero(marker == NodeMarker.ON_GAMMA) != ng:
        raise MeshError(f"{path}: node markers disagree with edge lists")
    m = AnnularMesh(nodes, tris, ns, ng, h, corners)
    m.check()
    return m


def write_vtk(path, m: AnnularMesh, point_data: dict[str, np.ndarray] | None = None) -> None:
    """Legacy ASCII unstructured-grid export, with optional nodal fields."""
    n, t = m.n_nodes, len(m.triangles)
    out = ["# vtk DataFile Version 3.0", "annular mesh", "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {n} double")
    out += [f"{x!r} {y!r} 0.0" for x, y in m.nodes.tolist()]
    out.append(f"CELLS {t} {4 * t}")
    out += [f"3 {i} {j} {k}" for i, j, k in m.triangles.tolist()]
    out.append(f"CELL_TYPES {t}")
    out += ["5"] * t
    out.append(f"POINT_DATA {n}")
    out += ["SCALARS marker int 1", "LOOKUP_TABLE default"]
    out += [str(int(k)) for k in m.node_marker]
    for name, values in (point_data or {}).items():
        v = np.asarray(values, dtype=float)
        if v.ndim == 2:
            out.append(f"VECTORS {name} double")
            out += [f"{a!r} {b!r} 0.0" for a, b in v.tolist()]
        else:
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [repr(x) for x in v.tolist()]
    Path(path).write_text("\n".join(out) + "\n")
