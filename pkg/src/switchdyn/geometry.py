"""Planar occlusion geometry: line-of-sight tests, occlusion polygons, clipping, polygon moments."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .gaussians import Gaussian

EPS = 1e-9
DEFAULT_RANGE = 20.0


class DegenerateGeometryWarning(UserWarning):
    """Raised when a predicate falls back to a more robust formulation."""


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.y, self.heading])):
            raise ValueError("pose entries must be finite")
        h = (float(self.heading) + np.pi) % (2 * np.pi) - np.pi
        object.__setattr__(self, "heading", h)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class OrientedBox:
    center: Pose2D
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("box length and width must be positive")

    def corners(self) -> np.ndarray:
        """Corners in counterclockwise order, shape (4, 2)."""
        c, s = np.cos(self.center.heading), np.sin(self.center.heading)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center.position

    def contains(self, p) -> bool:
        return bool(point_in_polygon(p, ConvexPolygon(self.corners())))


class ConvexPolygon:
    """Convex polygon with counterclockwise vertices."""

    def __init__(self, vertices):
        v = np.array(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ValueError("polygon needs at least three 2-D vertices")
        if not np.all(np.isfinite(v)):
            raise ValueError("polygon vertices must be finite")
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        if np.any(cross < -EPS) or not np.any(cross > EPS):
            raise ValueError("vertices must be convex and counterclockwise")
        v.setflags(write=False)
        self._v = v

    @property
    def vertices(self) -> np.ndarray:
        return self._v

    @property
    def area(self) -> float:
        return polygon_area(self._v)

    def __len__(self) -> int:
        return self._v.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, ConvexPolygon) and np.array_equal(self._v, other._v)

    def __repr__(self) -> str:
        return f"ConvexPolygon({self._v.tolist()!r})"

    def to_list(self) -> list:
        return self._v.tolist()


def polygon_area(v: np.ndarray) -> float:
    """Signed shoelace area (positive for counterclockwise order)."""
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _cross(o, a, b):
    return (a[..., 0] - o[..., 0]) * (b[..., 1] - o[..., 1]) - (a[..., 1] - o[..., 1]) * (b[..., 0] - o[..., 0])


def convex_hull(points) -> np.ndarray:
    """Monotone-chain hull, counterclockwise, collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float))))
    if len(pts) < 3:
        return np.array(pts)
    pts = np.array(pts)

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and _cross(out[-2], out[-1], p) <= EPS:
                out.pop()
            out.append(p)
        return out

    lower, upper = half(pts), half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def los_visible(ego, ped, obj) -> int:
    """Single-occluder visibility rule with the line of sight through ``obj``.

    Returns 1 when the pedestrian lies strictly above the line through the
    ego and the object, which is the visible side for this configuration.
    A vertical line of sight has no slope; there the equivalent orientation
    test (pedestrian left of the ego-to-object ray) is used instead.
    """
    ex, ey = (ego.x, ego.y) if isinstance(ego, Pose2D) else ego
    px, py = ped
    ox, oy = obj
    if abs(ox - ex) <= EPS:
        warnings.warn("vertical line of sight; using the orientation test", DegenerateGeometryWarning, stacklevel=2)
        return int(_cross(np.array([ex, ey]), np.array([ox, oy]), np.array([px, py])) > 0)
    slope = (oy - ey) / (ox - ex)
    return int(py - oy > slope * (px - ox))


def los_halfplane_polygon(ego, obj, range_: float = DEFAULT_RANGE) -> ConvexPolygon:
    """Hidden half-plane of the single-occluder rule, clipped to a square window.

    Used to cross-check :func:`los_visible` against the polygon route: points
    in the window are hidden by the rule iff they fall in this polygon.
    """
    e = np.array([ego.x, ego.y]) if isinstance(ego, Pose2D) else np.asarray(ego, dtype=float)
    o = np.asarray(obj, dtype=float)
    L = 4.0 * (range_ + np.linalg.norm(o - e))
    window = ConvexPolygon(o + L * np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]))
    d = o - e
    # hidden side is "y - y_obj <= slope (x - x_obj)", i.e. below the line
    below = np.array([d[1], -d[0]]) if d[0] > 0 else np.array([-d[1], d[0]])
    far = o + 2 * L * below / np.linalg.norm(below)
    u = d / np.linalg.norm(d)
    half = ConvexPolygon(convex_hull([o - 4 * L * u, o + 4 * L * u, far + 4 * L * u, far - 4 * L * u]))
    out = intersect_convex(window, half)
    if out is None:
        raise ValueError("degenerate half-plane")
    return out


def build_occlusion_polygon(ego: Pose2D, occluder: OrientedBox, range_: float = DEFAULT_RANGE) -> ConvexPolygon:
    """Region hidden from ``ego`` behind ``occluder``.

    The two box corners with extreme bearing seen from the ego bound the
    shadow; rays through them are extended ``range_`` meters beyond each
    corner.  The result is the convex hull of those corners, the extended
    far points and the box corners on the far side.
    """
    e = ego.position
    corners = occluder.corners()
    if point_in_polygon(e, ConvexPolygon(corners)):
        raise ValueError("ego lies inside the occluder box")
    ref = occluder.center.position - e
    base = np.arctan2(ref[1], ref[0])
    rel = corners - e
    ang = (np.arctan2(rel[:, 1], rel[:, 0]) - base + np.pi) % (2 * np.pi) - np.pi
    i_lo, i_hi = int(np.argmin(ang)), int(np.argmax(ang))
    lo, hi = corners[i_lo], corners[i_hi]
    pts = [lo, hi]
    for c in (lo, hi):
        u = (c - e) / np.linalg.norm(c - e)
        pts.append(c + range_ * u)
    # corners on the far side of the silhouette chord
    for j, c in enumerate(corners):
        if j in (i_lo, i_hi):
            continue
        if _cross(lo, hi, c) * _cross(lo, hi, e) < 0:
            pts.append(c)
    hull = convex_hull(np.array(pts))
    if hull.shape[0] < 3:
        # range 0 with a flat far face: keep the box's far part
        hull = convex_hull(np.vstack([pts, corners]))
    return ConvexPolygon(hull)


def point_in_polygon(p, poly: ConvexPolygon, eps: float = EPS):
    """1 if ``p`` is left of or on (within ``eps``) every counterclockwise edge.

    ``p`` may be a single point or an array of shape (..., 2).
    """
    v = poly.vertices
    p = np.asarray(p, dtype=float)
    a = v
    b = np.roll(v, -1, axis=0)
    e = b - a
    ln = np.linalg.norm(e, axis=1)
    rel = p[..., None, :] - a
    side = (e[:, 0] * rel[..., 1] - e[:, 1] * rel[..., 0]) / ln
    inside = np.all(side >= -eps, axis=-1)
    return inside.astype(int) if inside.ndim else int(inside)


def clip_halfplane(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Keep the part of a polygon left of the directed line ``a -> b``."""
    if points.shape[0] == 0:
        return points
    out = []
    n = points.shape[0]
    side = _cross(a, b, points)
    for i in range(n):
        p, q = points[i], points[(i + 1) % n]
        sp, sq = side[i], side[(i + 1) % n]
        if sp >= 0:
            out.append(p)
        if (sp >= 0) != (sq >= 0):
            t = sp / (sp - sq)
            out.append(p + t * (q - p))
    return np.array(out).reshape(-1, 2)


def intersect_convex(a: ConvexPolygon, b: ConvexPolygon, min_area: float = EPS) -> ConvexPolygon | None:
    """Sutherland-Hodgman clip of ``a`` by ``b``; None when the overlap is negligible."""
    pts = np.array(a.vertices)
    vb = b.vertices
    for i in range(vb.shape[0]):
        pts = clip_halfplane(pts, vb[i], vb[(i + 1) % vb.shape[0]])
        if pts.shape[0] < 3:
            return None
    if polygon_area(pts) < min_area:
        return None
    hull = convex_hull(pts)
    if hull.shape[0] < 3 or polygon_area(hull) < min_area:
        return None
    return ConvexPolygon(hull)


def polygon_moments(v: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Area, centroid and covariance of the uniform density on a polygon (fan triangulation)."""
    v = np.asarray(v, dtype=float)
    o = v[0]
    area = 0.0
    first = np.zeros(2)
    second = np.zeros((2, 2))
    for i in range(1, v.shape[0] - 1):
        tri = np.stack([o, v[i], v[i + 1]])
        a = 0.5 * float(_cross(tri[0], tri[1], tri[2]))
        s = tri.sum(axis=0)
        area += a
        first += a * s / 3.0
        second += a * (tri.T @ tri + np.outer(s, s)) / 12.0
    if abs(area) <= EPS:
        raise ValueError("polygon is degenerate")
    mean = first / area
    cov = second / area - np.outer(mean, mean)
    return area, mean, 0.5 * (cov + cov.T)


def polygon_gaussian_moments(poly: ConvexPolygon) -> Gaussian:
    """Gaussian with the mean and covariance of the uniform distribution over ``poly``."""
    _, mean, cov = polygon_moments(poly.vertices)
    return Gaussian(mean, cov)
