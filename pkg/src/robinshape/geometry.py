"""Closed planar curves: the shape catalog, discrete differential geometry and
the Hausdorff distance between curves."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import shapely
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

__all__ = [
    "Circle",
    "Kite",
    "Ribbon",
    "Peanut",
    "LShape",
    "ParametricBoundary",
    "CATALOG",
    "boundary_from_name",
    "Polyline",
    "Side",
    "CurveFrame",
    "sample_boundary",
    "resample_polyline",
    "curve_frame",
    "arc_derivative",
    "hausdorff_distance",
    "read_polyline",
    "write_polyline",
]


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# shape catalog
# ---------------------------------------------------------------------------


class ParametricBoundary:
    """A closed curve given by a map t -> (x, y) on [0, 2*pi)."""

    name = "parametric"
    smooth = True

    def __call__(self, t):
        raise NotImplementedError

    def describe(self) -> str:
        return self.name


@dataclass(frozen=True)
class Circle(ParametricBoundary):
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 1.0

    name = "circle"

    def __post_init__(self):
        if not self.radius > 0:
            raise GeometryError(f"circle radius must be positive, got {self.radius}")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.stack(
            [self.center[0] + self.radius * np.cos(t), self.center[1] + self.radius * np.sin(t)],
            axis=-1,
        )

    def describe(self) -> str:
        return f"circle:{self.radius!r}:{self.center[0]!r}:{self.center[1]!r}"


@dataclass(frozen=True)
class Kite(ParametricBoundary):
    name = "kite"

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        x = 0.195 + 0.4 * (np.cos(t) + 0.65 * np.cos(2 * t))
        y = 0.55 * np.sin(t)
        return np.stack([x, y], axis=-1)


@dataclass(frozen=True)
class Ribbon(ParametricBoundary):
    name = "ribbon"

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        x = 0.64 * np.cos(t)
        y = 0.48 * np.sin(t) * (1.8 + np.cos(2 * t))
        return np.stack([x, y], axis=-1)


@dataclass(frozen=True)
class Peanut(ParametricBoundary):
    name = "peanut"

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        r = (0.6 + 0.54 * np.cos(t) + 0.06 * np.sin(2 * t)) / (1 + 0.75 * np.cos(t))
        return np.stack([-0.25 + r * np.cos(t), 0.05 + r * np.sin(t)], axis=-1)


@dataclass(frozen=True)
class LShape(ParametricBoundary):
    """Boundary of (-0.55, 0.55)^2 minus [0, 0.55]^2."""

    name = "lshape"
    smooth = False
    vertices: tuple = (
        (-0.55, -0.55),
        (0.55, -0.55),
        (0.55, 0.0),
        (0.0, 0.0),
        (0.0, 0.55),
        (-0.55, 0.55),
    )

    def __call__(self, t):
        # arc-length parametrization of the polygon, scaled to [0, 2*pi)
        v = np.asarray(self.vertices, dtype=float)
        seg = np.roll(v, -1, axis=0) - v
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        s = np.mod(np.asarray(t, dtype=float), 2 * np.pi) / (2 * np.pi) * cum[-1]
        k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(v) - 1)
        frac = (s - cum[k]) / lengths[k]
        return v[k] + frac[..., None] * seg[k]


CATALOG: dict[str, Callable[[], ParametricBoundary]] = {
    "kite": Kite,
    "ribbon": Ribbon,
    "peanut": Peanut,
    "lshape": LShape,
}


def boundary_from_name(descriptor: str) -> ParametricBoundary:
    """Parse ``kite``, ``peanut``, ``circle:0.3`` or ``circle:0.3:cx:cy``."""
    parts = descriptor.strip().lower().split(":")
    name = parts[0]
    if name == "circle":
        radius = float(parts[1]) if len(parts) > 1 else 1.0
        center = (float(parts[2]), float(parts[3])) if len(parts) > 3 else (0.0, 0.0)
        return Circle(center=center, radius=radius)
    if name in ("peanut", "gamma_f", "gamma_p"):
        return Peanut()
    if name in CATALOG and len(parts) == 1:
        return CATALOG[name]()
    raise GeometryError(f"unknown boundary kind {descriptor!r}")


# ---------------------------------------------------------------------------
# polylines
# ---------------------------------------------------------------------------


def _signed_area(p: np.ndarray) -> float:
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments_intersect(p: np.ndarray) -> tuple[int, int] | None:
    """Return the first pair of non-adjacent crossing segments, or None."""
    n = len(p)
    a = p
    b = np.roll(p, -1, axis=0)
    for i in range(n - 2):
        j = np.arange(i + 2, n if i > 0 else n - 1)
        if len(j) == 0:
            continue
        p1, p2 = a[i], b[i]
        q1, q2 = a[j], b[j]
        d1 = _orient(p1, p2, q1)
        d2 = _orient(p1, p2, q2)
        d3 = _orient(q1, q2, p1[None, :])
        d4 = _orient(q1, q2, p2[None, :])
        hit = (d1 * d2 < 0) & (d3 * d4 < 0)
        if np.any(hit):
            return i, int(j[np.argmax(hit)])
    return None


def _orient(a, b, c):
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    c = np.atleast_2d(c)
    return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])


class Polyline:
    """Closed, counterclockwise, simple polygonal curve.

    ``corners`` lists vertex indices that must survive resampling (the
    L-shape's polygon corners); smooth curves have none.
    """

    __slots__ = ("_points", "corners")

    def __init__(self, points, corners=(), *, check: bool = True):
        pts = np.array(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise GeometryError("polyline points must have shape (n, 2)")
        if len(pts) >= 2 and np.allclose(pts[0], pts[-1]) and len(pts) > 3:
            pts = pts[:-1]
        if len(pts) < 3:
            raise GeometryError("a closed polyline needs at least 3 vertices")
        pts.setflags(write=False)
        self._points = pts
        self.corners = tuple(int(c) for c in corners)
        if check:
            self.validate()

    def validate(self) -> None:
        p = self._points
        edges = np.roll(p, -1, axis=0) - p
        lengths = np.hypot(edges[:, 0], edges[:, 1])
        if lengths.min() <= 0.0:
            raise GeometryError(f"coincident consecutive vertices at index {int(np.argmin(lengths))}")
        if _signed_area(p) <= 0.0:
            raise GeometryError("polyline must be oriented counterclockwise")
        hit = _segments_intersect(p)
        if hit is not None:
            raise GeometryError(f"polyline self-intersects: segments {hit[0]} and {hit[1]}")

    @property
    def points(self) -> np.ndarray:
        return self._points

    def __len__(self) -> int:
        return len(self._points)

    def __repr__(self) -> str:
        return f"Polyline(n={len(self)}, length={self.length:.6g})"

    @property
    def edges(self) -> np.ndarray:
        return np.roll(self._points, -1, axis=0) - self._points

    @property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.hypot(e[:, 0], e[:, 1])

    @property
    def length(self) -> float:
        return float(self.edge_lengths.sum())

    @property
    def area(self) -> float:
        return _signed_area(self._points)

    @property
    def diameter(self) -> float:
        p = self._points
        return float(np.hypot(*(p.max(axis=0) - p.min(axis=0))))

    def arc_parameter(self) -> np.ndarray:
        """Cumulative arc length at each vertex, starting at 0."""
        return np.concatenate([[0.0], np.cumsum(self.edge_lengths)[:-1]])

    def contains(self, xy) -> np.ndarray:
        """Even-odd point-in-polygon test for an (m, 2) array of points."""
        return points_in_polygon(np.atleast_2d(xy), self._points)

    def distance(self, xy) -> np.ndarray:
        """Distance from each point to the curve."""
        return _nearby_segment_distance(np.atleast_2d(np.asarray(xy, dtype=float)), self._points)


def points_in_polygon(xy: np.ndarray, poly: np.ndarray) -> np.ndarray:
    polygon = shapely.Polygon(poly)
    shapely.prepare(polygon)
    return shapely.contains_xy(polygon, xy[:, 0], xy[:, 1])


def _nearby_segment_distance(xy: np.ndarray, poly: np.ndarray, k: int = 4) -> np.ndarray:
    """Distance to the closed polygon, checking only segments next to the k
    nearest vertices (exact unless the curve is badly under-resolved)."""
    k = min(k, len(poly))
    _, idx = cKDTree(poly).query(xy, k=k)
    idx = idx.reshape(len(xy), k)
    n = len(poly)
    best = np.full(len(xy), np.inf)
    for seg_start in (idx, (idx - 1) % n):
        a = poly[seg_start]
        b = poly[(seg_start + 1) % n]
        d = b - a
        dd = np.maximum(np.einsum("ijk,ijk->ij", d, d), 1e-300)
        r = xy[:, None, :] - a
        lam = np.clip(np.einsum("ijk,ijk->ij", r, d) / dd, 0.0, 1.0)
        e = r - lam[..., None] * d
        best = np.minimum(best, np.sqrt(np.einsum("ijk,ijk->ij", e, e)).min(axis=1))
    return best


def _point_segment_distance(xy: np.ndarray, a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """min over segments [a_j, b_j] of the distance to each point of xy."""
    d = b - a
    dd = np.einsum("ij,ij->i", d, d)
    dd = np.where(dd > 0, dd, 1.0)
    out = np.empty(len(xy))
    for s in range(0, len(xy), chunk):
        p = xy[s : s + chunk]
        rx = p[:, None, 0] - a[None, :, 0]
        ry = p[:, None, 1] - a[None, :, 1]
        lam = np.clip((rx * d[None, :, 0] + ry * d[None, :, 1]) / dd[None, :], 0.0, 1.0)
        ex = rx - lam * d[None, :, 0]
        ey = ry - lam * d[None, :, 1]
        out[s : s + chunk] = np.sqrt((ex * ex + ey * ey).min(axis=1))
    return out


def sample_boundary(kind: ParametricBoundary, n: int) -> Polyline:
    """Sample a catalog boundary as a CCW polyline with about ``n`` vertices.

    Smooth kinds use equispaced parameter values. The L-shape is resampled
    uniformly by arc length with its six corners kept exactly.
    """
    if not isinstance(kind, ParametricBoundary):
        raise GeometryError(f"unknown boundary kind {kind!r}")
    n = int(n)
    if n < 8:
        raise GeometryError(f"need at least 8 samples, got {n}")
    if isinstance(kind, LShape):
        return _sample_polygon(np.asarray(kind.vertices, dtype=float), n)
    t = 2 * np.pi * np.arange(n) / n
    pts = kind(t)
    if _signed_area(pts) < 0:
        pts = np.concatenate([pts[:1], pts[:0:-1]])
    return Polyline(pts)


def _sample_polygon(vertices: np.ndarray, n: int) -> Polyline:
    seg = np.roll(vertices, -1, axis=0) - vertices
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    spacing = lengths.sum() / n
    pts = []
    corners = []
    for v, d, L in zip(vertices, seg, lengths):
        corners.append(len(pts))
        m = max(1, int(round(L / spacing)))
        frac = np.arange(m) / m
        pts.extend(v + frac[:, None] * d)
    return Polyline(np.array(pts), corners=corners)


def resample_polyline(P: Polyline, spacing: float, n_min: int = 8) -> Polyline:
    """Redistribute vertices uniformly in arc length at about ``spacing``.

    Corner vertices are kept; between corners (or around the whole curve
    when there are none) the curve is interpolated by a periodic cubic spline
    in arc length, so resampling a finely sampled smooth curve keeps the new
    vertices on the underlying curve to high accuracy.
    """
    if spacing <= 0:
        raise GeometryError("spacing must be positive")
    p = P.points
    s = np.concatenate([[0.0], np.cumsum(P.edge_lengths)])
    total = s[-1]
    if not P.corners:
        n = max(n_min, int(math.ceil(total / spacing - 1e-9)))
        closed = np.vstack([p, p[:1]])
        spline = CubicSpline(s, closed, bc_type="periodic")
        return Polyline(spline(total * np.arange(n) / n))
    # rotate so the first corner is vertex 0, then interpolate linearly
    # between consecutive corners
    first = min(P.corners)
    q = np.roll(p, -first, axis=0)
    corners = sorted(c - first for c in P.corners) + [len(p)]
    q = np.vstack([q, q[:1]])
    sq = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(q, axis=0).T))])
    pts = []
    new_corners = []
    for a, b in zip(corners[:-1], corners[1:]):
        m = max(1, int(round((sq[b] - sq[a]) / spacing)))
        target = sq[a] + (sq[b] - sq[a]) * np.arange(m) / m
        new_corners.append(len(pts))
        seg_s, seg_p = sq[a : b + 1], q[a : b + 1]
        pts.extend(np.stack([np.interp(target, seg_s, seg_p[:, 0]), np.interp(target, seg_s, seg_p[:, 1])], axis=1))
    return Polyline(np.array(pts), corners=new_corners)


# ---------------------------------------------------------------------------
# discrete differential geometry
# ---------------------------------------------------------------------------


class Side(enum.Enum):
    """Which boundary of the annulus a curve is: decides the normal direction."""

    INNER = "inner"
    OUTER = "outer"


@dataclass(frozen=True)
class CurveFrame:
    """Per-vertex tangent, normal, curvature and arc-length weight.

    ``normal`` points out of the annulus: into the inclusion on the inner
    boundary, away from the body on the outer one. ``curvature`` is the
    tangential divergence of that normal, so a circle of radius r has
    curvature +1/r as the outer boundary and -1/r as the inner one.
    """

    tangent: np.ndarray
    normal: np.ndarray
    curvature: np.ndarray
    weight: np.ndarray
    side: Side
    corners: tuple[int, ...] = field(default=())


CORNER_ANGLE = 0.5  # radians of turning at a single vertex


def curve_frame(P: Polyline, side: Side | str = Side.INNER) -> CurveFrame:
    side = Side(side)
    p = P.points
    if len(p) < 8:
        raise GeometryError("curve_frame needs at least 8 vertices")
    e_next = np.roll(p, -1, axis=0) - p
    l_next = np.hypot(e_next[:, 0], e_next[:, 1])
    tiny = 1e-12 * P.diameter
    if l_next.min() < tiny:
        raise GeometryError(f"degenerate edge starting at vertex {int(np.argmin(l_next))}")
    e_prev = np.roll(e_next, 1, axis=0)
    l_prev = np.roll(l_next, 1)
    u_next = e_next / l_next[:, None]
    u_prev = e_prev / l_prev[:, None]

    # turning angle from incoming to outgoing edge, positive for left turns
    cross = u_prev[:, 0] * u_next[:, 1] - u_prev[:, 1] * u_next[:, 0]
    dot = np.einsum("ij,ij->i", u_prev, u_next)
    turn = np.arctan2(cross, dot)
    weight = 0.5 * (l_prev + l_next)
    kappa_geo = turn / weight

    # tangent bisects the two edge directions (angle averaging at corners)
    half = 0.5 * turn
    c, s = np.cos(half), np.sin(half)
    tangent = np.stack([c * u_prev[:, 0] - s * u_prev[:, 1], s * u_prev[:, 0] + c * u_prev[:, 1]], axis=1)
    tangent /= np.hypot(tangent[:, 0], tangent[:, 1])[:, None]
    right = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)

    if side is Side.OUTER:
        normal, curvature = right, kappa_geo
    else:
        normal, curvature = -right, -kappa_geo
    flagged = set(P.corners) | set(np.flatnonzero(np.abs(turn) > CORNER_ANGLE).tolist())
    for a in (tangent, normal, curvature, weight):
        a.setflags(write=False)
    return CurveFrame(tangent, normal, curvature, weight, side, tuple(sorted(flagged)))


def arc_derivative(values, P: Polyline) -> np.ndarray:
    """Derivative with respect to arc length by three-point central differences.

    The stencil is exact for quadratics on non-uniform spacing.
    """
    f = np.asarray(values, dtype=float)
    if f.shape != (len(P),):
        raise GeometryError(f"expected {len(P)} values, got shape {f.shape}")
    hp = P.edge_lengths  # i -> i+1
    hm = np.roll(hp, 1)  # i-1 -> i
    fp = np.roll(f, -1)
    fm = np.roll(f, 1)
    return (hm * hm * fp - hp * hp * fm + (hp * hp - hm * hm) * f) / (hp * hm * (hp + hm))


# ---------------------------------------------------------------------------
# Hausdorff distance
# ---------------------------------------------------------------------------


def _densify(P: Polyline, factor: int) -> np.ndarray:
    p = P.points
    e = P.edges
    frac = np.arange(factor) / factor
    return (p[:, None, :] + frac[None, :, None] * e[:, None, :]).reshape(-1, 2)


def hausdorff_distance(A: Polyline, B: Polyline, factor: int = 4) -> float:
    """Symmetric Hausdorff distance between two closed polylines.

    Each directed distance samples one curve ``factor`` times per edge and
    measures exact point-to-segment distances to the other curve.
    """
    pa, pb = A.points, B.points
    d_ab = _point_segment_distance(_densify(A, factor), pb, np.roll(pb, -1, axis=0)).max()
    d_ba = _point_segment_distance(_densify(B, factor), pa, np.roll(pa, -1, axis=0)).max()
    return float(max(d_ab, d_ba))


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

POLYLINE_HEADER = "# polyline v1"


def write_polyline(path, P: Polyline) -> None:
    lines = [POLYLINE_HEADER]
    if P.corners:
        lines.append("# corners " + " ".join(str(c) for c in P.corners))
    lines.extend(f"{x!r},{y!r}" for x, y in P.points.tolist())
    Path(path).write_text("\n".join(lines) + "\n")


def read_polyline(path) -> Polyline:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != POLYLINE_HEADER:
        raise GeometryError(f"{path}: missing header {POLYLINE_HEADER!r}")
    corners: list[int] = []
    pts = []
    for lineno, line in enumerate(text[1:], start=2):
        line = line.strip()
        if not line:
            continue
        if line.startswith("# corners"):
            corners = [int(c) for c in line.split()[2:]]
            continue
        if line.startswith("#"):
            continue
        try:
            x, y = line.split(",")
            pts.append((float(x), float(y)))
        except ValueError:
            raise GeometryError(f"{path}:{lineno}: malformed row {line!r}") from None
    return Polyline(pts, corners=corners)
