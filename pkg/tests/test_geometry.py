import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from oracles import distance_to_boundary, random_convex_polygon, ray_casting_inside
from switchdyn.geometry import (ConvexPolygon, DegenerateGeometryWarning, OrientedBox, Pose2D,
                                build_occlusion_polygon, intersect_convex, los_halfplane_polygon, los_visible,
                                point_in_polygon, polygon_area, polygon_gaussian_moments)

UNIT = ConvexPolygon([[0, 0], [1, 0], [1, 1], [0, 1]])


def shoelace(v):
    x, y = np.asarray(v).T
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def uniform_in(poly, rng, n):
    lo, hi = poly.vertices.min(axis=0), poly.vertices.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 2))
    return pts, lo, hi


class TestLosVisible:
    def test_above_line_visible(self):
        assert los_visible(Pose2D(0, 0), (10, 11), (5, 5)) == 1

    def test_below_line_hidden(self):
        assert los_visible(Pose2D(0, 0), (10, 9), (5, 5)) == 0

    def test_on_line_hidden(self):
        assert los_visible(Pose2D(0, 0), (10, 10), (5, 5)) == 0

    def test_vertical_line_of_sight_warns(self):
        with pytest.warns(DegenerateGeometryWarning):
            v = los_visible(Pose2D(0, 0), (-1, 10), (0, 5))
        assert v == 1

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(3, 10), st.floats(-0.9, 0.9), st.floats(0.05, 0.95),
           st.floats(-8, 8))
    def test_agrees_with_halfplane_polygon(self, ex, ey, dist, slope_angle, frac, offset):
        ego = Pose2D(ex, ey)
        obj = np.array([ex + dist * np.cos(slope_angle), ey + dist * np.sin(slope_angle)])
        # pedestrian beyond the object and within range, offset sideways from the ray
        u = (obj - ego.position) / dist
        n = np.array([-u[1], u[0]])
        ped = obj + frac * 20.0 * u + offset * n
        poly = los_halfplane_polygon(ego, obj)
        along = np.dot(ped - obj, n)
        if abs(along) < 1e-6:
            return
        assert los_visible(ego, ped, obj) == 1 - point_in_polygon(ped, poly)


class TestOcclusionPolygon:
    def test_axis_box_matches_independent_hull(self):
        ego = Pose2D(0, 0)
        box = OrientedBox(Pose2D(10, 0), 1.0, 1.0)
        poly = build_occlusion_polygon(ego, box, 20.0)
        corners = np.array([[9.5, -0.5], [9.5, 0.5], [10.5, -0.5], [10.5, 0.5]])
        far = [c + 20.0 * c / np.linalg.norm(c) for c in corners[:2]]
        pts = np.vstack([corners, far])
        want = shoelace(pts[ConvexHull(pts).vertices])
        assert poly.area == pytest.approx(want, rel=1e-12)
        assert point_in_polygon((10.5, 0.0), poly) == 1
        assert poly.vertices[:, 0].max() == pytest.approx(9.5 + 20.0 * 9.5 / np.hypot(9.5, 0.5))

    def test_symmetric_about_axis(self):
        poly = build_occlusion_polygon(Pose2D(0, 0), OrientedBox(Pose2D(10, 0), 4.0, 2.0), 20.0)
        v = poly.vertices
        mirrored = v * [1, -1]
        d = np.linalg.norm(v[:, None] - mirrored[None], axis=-1)
        assert np.all(d.min(axis=1) < 1e-9)

    def test_small_range_shrinks_to_box(self):
        box = OrientedBox(Pose2D(10, 0), 1.0, 1.0)
        box_area = 1.0
        on_axis = build_occlusion_polygon(Pose2D(0, 0), box, 1e-9)
        assert on_axis.area <= box_area + 1e-9
        off_axis = build_occlusion_polygon(Pose2D(0, 8), box, 1e-9)
        assert off_axis.area < box_area

    def test_ego_inside_box(self):
        with pytest.raises(ValueError):
            build_occlusion_polygon(Pose2D(10, 0), OrientedBox(Pose2D(10, 0), 4.0, 2.0))

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(6, 15), st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi),
           st.floats(1.0, 5.0), st.floats(0.5, 2.5), st.floats(1.0, 30.0))
    def test_valid_and_covers_box(self, ex, ey, dist, bearing, heading, length, width, rng_):
        ego = Pose2D(ex, ey)
        c = ego.position + dist * np.array([np.cos(bearing), np.sin(bearing)])
        box = OrientedBox(Pose2D(c[0], c[1], heading), length, width)
        poly = build_occlusion_polygon(ego, box, rng_)
        ConvexPolygon(poly.vertices)  # re-validates orientation and convexity
        # every far-side corner and the box centre lie inside or on the shadow
        assert point_in_polygon(c, poly, eps=1e-7) == 1
        near = np.argmin(np.linalg.norm(box.corners() - ego.position, axis=1))
        far = [p for j, p in enumerate(box.corners()) if j != near]
        assert all(point_in_polygon(p, poly, eps=1e-7) == 1 for p in far)


class TestPointInPolygon:
    def test_unit_square(self):
        assert point_in_polygon((0.5, 0.5), UNIT) == 1
        assert point_in_polygon((1.5, 0.5), UNIT) == 0

    def test_boundary_counts_inside(self):
        assert point_in_polygon((1.0, 0.5), UNIT) == 1

    def test_vectorised(self):
        np.testing.assert_array_equal(point_in_polygon(np.array([[0.5, 0.5], [2, 2]]), UNIT), [1, 0])

    def test_against_ray_casting(self, rng):
        for _ in range(10):
            v = random_convex_polygon(rng)
            poly = ConvexPolygon(v)
            lo, hi = v.min(axis=0) - 1, v.max(axis=0) + 1
            pts = rng.uniform(lo, hi, size=(100, 2))
            for p in pts:
                if distance_to_boundary(p, v) < 1e-9:
                    continue
                assert point_in_polygon(p, poly) == int(ray_casting_inside(p, v))


class TestIntersectConvex:
    def test_shifted_squares(self):
        b = ConvexPolygon(UNIT.vertices + 0.5)
        assert intersect_convex(UNIT, b).area == pytest.approx(0.25, abs=1e-12)

    def test_disjoint(self):
        assert intersect_convex(UNIT, ConvexPolygon(UNIT.vertices + 3.0)) is None

    def test_touching_edge_is_absent(self):
        assert intersect_convex(UNIT, ConvexPolygon(UNIT.vertices + [1.0, 0.0])) is None

    def test_area_matches_monte_carlo(self):
        r = np.random.default_rng(2)
        done = 0
        while done < 3:
            a, b = ConvexPolygon(random_convex_polygon(r)), ConvexPolygon(random_convex_polygon(r))
            out = intersect_convex(a, b)
            if out is None or out.area < 5.0:
                continue
            lo = np.maximum(a.vertices.min(0), b.vertices.min(0))
            hi = np.minimum(a.vertices.max(0), b.vertices.max(0))
            pts = r.uniform(lo, hi, size=(1_000_000, 2))
            hits = point_in_polygon(pts, a) & point_in_polygon(pts, b)
            mc = hits.mean() * np.prod(hi - lo)
            assert out.area == pytest.approx(mc, rel=0.02)
            done += 1

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_membership_and_area_bound(self, seed):
        r = np.random.default_rng(seed)
        a, b = ConvexPolygon(random_convex_polygon(r)), ConvexPolygon(random_convex_polygon(r))
        out = intersect_convex(a, b)
        pts = r.uniform(-20, 20, size=(300, 2))
        both = point_in_polygon(pts, a) & point_in_polygon(pts, b)
        if out is None:
            clear = [min(distance_to_boundary(p, a.vertices), distance_to_boundary(p, b.vertices)) > 1e-6 for p in pts]
            assert not np.any(both.astype(bool) & np.array(clear))
            return
        assert out.area <= min(a.area, b.area) + 1e-9
        inside = point_in_polygon(pts, out)
        for p, x, y in zip(pts, inside, both):
            if min(distance_to_boundary(p, a.vertices), distance_to_boundary(p, b.vertices)) > 1e-6:
                assert x == y


class TestPolygonMoments:
    def test_unit_square(self):
        g = polygon_gaussian_moments(UNIT)
        np.testing.assert_allclose(g.mean, [0.5, 0.5], atol=1e-15)
        np.testing.assert_allclose(g.cov, np.eye(2) / 12, atol=1e-15)

    def test_translation(self, rng):
        poly = ConvexPolygon(random_convex_polygon(rng))
        g = polygon_gaussian_moments(poly)
        g2 = polygon_gaussian_moments(ConvexPolygon(poly.vertices + [3.0, -7.0]))
        np.testing.assert_allclose(g2.mean, g.mean + [3.0, -7.0], atol=1e-10)
        np.testing.assert_allclose(g2.cov, g.cov, atol=1e-10)

    def test_against_monte_carlo(self):
        r = np.random.default_rng(8)
        for _ in range(3):
            poly = ConvexPolygon(random_convex_polygon(r))
            g = polygon_gaussian_moments(poly)
            pts, _, _ = uniform_in(poly, r, 2_000_000)
            pts = pts[point_in_polygon(pts, poly).astype(bool)][:1_000_000]
            scale = np.sqrt(np.trace(g.cov))
            np.testing.assert_allclose(g.mean, pts.mean(axis=0), atol=0.01 * scale)
            np.testing.assert_allclose(g.cov, np.cov(pts.T), atol=0.01 * np.trace(g.cov))

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            ConvexPolygon([[0, 0], [1, 0], [2, 0]])

    def test_signed_area(self):
        assert polygon_area(UNIT.vertices) == pytest.approx(1.0)
        assert polygon_area(UNIT.vertices[::-1]) == pytest.approx(-1.0)
