"""Hidden regions as planar polygon sets, and Gaussian integrals over them."""
from __future__ import annotations

import numpy as np
import shapely
from scipy.special import erf
from shapely.geometry import Polygon
from shapely.geometry.polygon import orient

from ..geometry import ConvexPolygon

_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)
_PANELS = 8
_R_SAT = 9.0  # radius (in standard deviations) beyond which radial integrals are saturated
_PRUNE = 12.0
_MIN_AREA = 1e-9
SIMPLIFY_TOL = 0.01  # metres; bounds the vertex growth of repeatedly intersected regions


def _polygonal(geom):
    """Keep the areal part of a shapely result as a list of oriented polygons."""
    parts = []
    for g in getattr(geom, "geoms", [geom]):
        if isinstance(g, Polygon):
            if not g.is_empty and g.area > _MIN_AREA:
                parts.append(orient(g, 1.0))
        elif hasattr(g, "geoms"):
            parts.extend(_polygonal(g))
    return parts


class HiddenRegion:
    """A possibly non-convex, possibly disconnected planar region.

    Boolean operations are delegated to shapely; Gaussian integrals use the
    oriented boundary rings (outer rings counterclockwise, holes clockwise).
    """

    __slots__ = ("_parts", "_key")

    def __init__(self, parts=()):
        self._parts = tuple(parts)
        self._key = b"".join(shapely.to_wkb(p) for p in self._parts)

    @classmethod
    def empty(cls) -> "HiddenRegion":
        return cls(())

    @classmethod
    def union(cls, polys) -> "HiddenRegion":
        geoms = [Polygon(p.vertices if isinstance(p, ConvexPolygon) else np.asarray(p, dtype=float)) for p in polys]
        if not geoms:
            return cls.empty()
        return cls(_polygonal(shapely.union_all(geoms)))

    @property
    def geometry(self):
        return shapely.MultiPolygon(list(self._parts)) if self._parts else shapely.MultiPolygon()

    @property
    def is_empty(self) -> bool:
        return not self._parts

    @property
    def pieces(self) -> tuple:
        """Oriented boundary rings as (N, 2) arrays, without the closing vertex."""
        rings = []
        for p in self._parts:
            rings.append(np.asarray(p.exterior.coords)[:-1])
            rings.extend(np.asarray(r.coords)[:-1] for r in p.interiors)
        return tuple(rings)

    def intersect(self, other: "HiddenRegion") -> "HiddenRegion":
        if self.is_empty or other.is_empty:
            return HiddenRegion.empty()
        out = self.geometry.intersection(other.geometry)
        return HiddenRegion(_polygonal(out.simplify(SIMPLIFY_TOL, preserve_topology=True)))

    def __eq__(self, other) -> bool:
        return isinstance(other, HiddenRegion) and self._key == other._key

    def __hash__(self) -> int:
        return hash(self._key)

    def __repr__(self) -> str:
        return f"HiddenRegion(parts={len(self._parts)}, area={self.area:.3f})"

    @property
    def area(self) -> float:
        return float(sum(p.area for p in self._parts))

    def contains(self, points) -> np.ndarray:
        """Closed-set membership (boundary points count as inside)."""
        points = np.asarray(points, dtype=float)
        if self.is_empty:
            return np.zeros(points.shape[:-1], dtype=bool)
        return np.asarray(shapely.intersects_xy(self.geometry, points[..., 0], points[..., 1]), dtype=bool)


def _edge_integrals(a: np.ndarray, b: np.ndarray):
    """Standard-normal integrals over signed triangles (origin, a_i, b_i).

    Returns the mass (E,), first moments (E, 2) and second moments (E, 2, 2).
    """
    E = a.shape[0]
    m0 = np.zeros(E)
    m1 = np.zeros((E, 2))
    m2 = np.zeros((E, 2, 2))
    cr = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    d = b - a
    ln = np.linalg.norm(d, axis=1)
    # triangles with (numerically) zero area carry no mass; their sweep direction is ill-defined
    scale = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    ok = (np.abs(cr) > 1e-12 * scale) & (ln > 0)
    if not np.any(ok):
        return m0, m1, m2
    a, b, cr, d, ln = a[ok], b[ok], cr[ok], d[ok], ln[ok]
    th_a = np.arctan2(a[:, 1], a[:, 0])
    delta = np.arctan2(cr, np.sum(a * b, axis=1))
    # unit normal of the edge line pointing away from the origin
    n = np.stack([d[:, 1], -d[:, 0]], axis=1) / ln[:, None]
    h = np.sum(n * a, axis=1)
    n = np.where(h[:, None] < 0, -n, n)
    h = np.abs(h)
    phi = np.arctan2(n[:, 1], n[:, 0])

    # sweep expressed relative to phi, oriented increasing
    lo = (th_a - phi + np.pi) % (2 * np.pi) - np.pi
    hi = lo + delta
    sign = np.sign(delta)
    lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
    beta = np.where(h < _R_SAT, np.arccos(np.minimum(h / _R_SAT, 1.0)), 0.0)
    c_lo, c_hi = np.maximum(lo, -beta), np.minimum(hi, beta)
    c_hi = np.maximum(c_hi, c_lo)

    # saturated parts: R >= _R_SAT, radial integrals at their limits
    g0, g1, g2 = 1.0, np.sqrt(np.pi / 2), 2.0

    def ang_int(x0, x1):
        t0, t1 = x0 + phi, x1 + phi
        i0 = x1 - x0
        i1 = np.stack([np.sin(t1) - np.sin(t0), np.cos(t0) - np.cos(t1)], axis=1)
        s2 = 0.5 * (np.sin(2 * t1) - np.sin(2 * t0))
        c2 = 0.5 * (np.cos(2 * t0) - np.cos(2 * t1))
        ixx = 0.5 * i0 + 0.5 * s2
        iyy = 0.5 * i0 - 0.5 * s2
        ixy = 0.5 * c2
        i2 = np.stack([np.stack([ixx, ixy], 1), np.stack([ixy, iyy], 1)], 1)
        return i0, i1, i2

    s_m0 = np.zeros(a.shape[0])
    s_m1 = np.zeros((a.shape[0], 2))
    s_m2 = np.zeros((a.shape[0], 2, 2))
    for x0, x1 in ((lo, np.minimum(hi, c_lo)), (np.maximum(lo, c_hi), hi)):
        x1 = np.maximum(x1, x0)
        i0, i1, i2 = ang_int(x0, x1)
        s_m0 += g0 * i0
        s_m1 += g1 * i1
        s_m2 += g2 * i2

    # unsaturated part by composite Gauss-Legendre in angle, only where needed
    near = c_hi > c_lo
    if np.any(near):
        lo_n, hi_n, h_n, phi_n = c_lo[near], c_hi[near], h[near], phi[near]
        nn = lo_n.shape[0]
        width = (hi_n - lo_n) / _PANELS
        starts = lo_n[:, None] + width[:, None] * np.arange(_PANELS)
        nodes = (starts[:, :, None] + 0.5 * width[:, None, None] * (_GL_X + 1.0)).reshape(nn, -1)
        wts = np.broadcast_to(0.5 * width[:, None, None] * _GL_W, (nn, _PANELS, _GL_W.size)).reshape(nn, -1)
        cosr = np.cos(nodes)
        R = np.where(cosr > 1e-300, h_n[:, None] / np.maximum(cosr, 1e-300), np.inf)
        R = np.minimum(R, 50.0)
        e = np.exp(-0.5 * R**2)
        w0 = wts * (1.0 - e)
        w1 = wts * (np.sqrt(np.pi / 2) * erf(R / np.sqrt(2)) - R * e)
        w2 = wts * (2.0 - (R**2 + 2.0) * e)
        th = nodes + phi_n[:, None]
        c, s = np.cos(th), np.sin(th)
        wc, ws = w2 * c, w2 * s
        xy = np.sum(wc * s, axis=1)
        s_m0[near] += np.sum(w0, axis=1)
        s_m1[near] += np.stack([np.sum(w1 * c, axis=1), np.sum(w1 * s, axis=1)], axis=1)
        s_m2[near] += np.stack([np.stack([np.sum(wc * c, axis=1), xy], 1),
                                np.stack([xy, np.sum(ws * s, axis=1)], 1)], 1)

    norm = sign / (2 * np.pi)
    m0[ok] = norm * s_m0
    m1[ok] = norm[:, None] * s_m1
    m2[ok] = norm[:, None, None] * s_m2
    return m0, m1, m2


def _far_from_origin(v: np.ndarray) -> bool:
    """True when the bounding box of ``v`` stays more than ``_PRUNE`` from the origin."""
    lo, hi = v.min(axis=0), v.max(axis=0)
    gap = np.maximum(np.maximum(lo, -hi), 0.0)
    return bool(np.hypot(*gap) > _PRUNE)


def gaussian_region_moments(mean, cov, pieces):
    """Raw moments of ``N(mean, cov)`` restricted to the region bounded by ``pieces``.

    ``pieces`` are closed rings oriented counterclockwise for outer
    boundaries and clockwise for holes.  Returns ``(mass, first, second)``
    where ``first = E[s 1_H]`` and ``second = E[s s^T 1_H]``.  Integrals are
    computed in whitened coordinates as a signed sum over the triangles
    (origin, edge): the radial integrals are closed form and the angular ones
    use composite Gauss-Legendre quadrature.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    L = np.linalg.cholesky(cov)
    Linv = np.linalg.inv(L)
    avs, bvs = [], []
    for p in pieces:
        z = (np.asarray(p, dtype=float) - mean) @ Linv.T
        if _far_from_origin(z):
            continue
        avs.append(z)
        bvs.append(np.roll(z, -1, axis=0))
    if not avs:
        return 0.0, np.zeros(2), np.zeros((2, 2))
    m0, m1, m2 = _edge_integrals(np.concatenate(avs), np.concatenate(bvs))
    z0 = float(np.clip(m0.sum(), 0.0, 1.0))
    z1 = m1.sum(axis=0)
    z2 = m2.sum(axis=0)
    Lz1 = L @ z1
    first = mean * z0 + Lz1
    second = np.outer(mean, mean) * z0 + np.outer(mean, Lz1) + np.outer(Lz1, mean) + L @ z2 @ L.T
    return z0, first, 0.5 * (second + second.T)


def gaussian_region_mass(mean, cov, pieces) -> float:
    return gaussian_region_moments(mean, cov, pieces)[0]
