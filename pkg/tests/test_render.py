import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from switchdyn.occlusion import TrackerConfig, run_filter
from switchdyn.render import (ForecastPanel, View, count_ellipses, covariance_ellipse, render_forecast,
                              render_tracking)
from switchdyn.scenarios import generate_scene, scene_frames


def track(kind, seed=0, duration=60):
    scene = generate_scene(kind, seed=seed, duration=duration)
    history, _ = run_filter(scene_frames(scene), TrackerConfig(range=scene.range_))
    frames = [b.to_dict() for b in history]
    return scene, frames, render_tracking(frames, [p.traj.positions for p in scene.pedestrians])


@pytest.fixture(scope="module")
def reveal():
    return track("reveal-behind-parked")


class TestEllipseGeometry:
    def test_axis_aligned(self):
        cx, cy, rx, ry, angle = covariance_ellipse([1.0, 2.0], np.diag([4.0, 1.0]))
        assert (cx, cy) == (1.0, 2.0)
        assert rx == pytest.approx(4.0) and ry == pytest.approx(2.0)
        assert abs(np.sin(np.radians(angle))) < 1e-12

    def test_rotated(self):
        c, s = np.cos(0.4), np.sin(0.4)
        R = np.array([[c, -s], [s, c]])
        _, _, rx, ry, angle = covariance_ellipse([0, 0], R @ np.diag([9.0, 0.25]) @ R.T, nsig=1.0)
        assert rx == pytest.approx(3.0) and ry == pytest.approx(0.5)
        assert np.tan(np.radians(angle)) == pytest.approx(np.tan(0.4))

    def test_view_flips_y(self):
        v = View(0, 0, 10, 10, 100, 100)
        assert v.px((0, 0)) == (0.0, 100.0)
        assert v.px((10, 10)) == (100.0, 0.0)


class TestTrackingFrames:
    def test_valid_svg(self, reveal):
        for svg in reveal[2][:3]:
            root = ET.fromstring(svg)
            assert root.tag.endswith("svg")

    def test_ellipses_match_live_slots(self, reveal):
        _, frames, svgs = reveal
        for fr, svg in zip(frames, svgs):
            assert count_ellipses(svg) == sum(not s["dead"] for s in fr["slots"])

    def test_ellipse_count_falls_as_slots_die(self, reveal):
        _, frames, svgs = reveal
        counts = [count_ellipses(s) for s in svgs]
        assert counts[-1] < counts[0]
        assert all(b <= a for a, b in zip(counts, counts[1:]))

    def test_opacity_tracks_existence(self, reveal):
        _, frames, svgs = reveal
        fr, svg = frames[5], svgs[5]
        live = [s["existence"] for s in fr["slots"] if not s["dead"]]
        drawn = [float(x) for x in re.findall(r'stroke-opacity="([0-9.]+)" stroke-width="1.2" class="belief"', svg)]
        np.testing.assert_allclose(drawn, live, atol=5e-4)

    def test_scene_elements_drawn(self, reveal):
        scene, _, svgs = reveal
        svg = svgs[0]
        assert svg.count('class="ego"') == 1
        assert svg.count("<path d=") == len(scene.pedestrians)
        assert svg.count('stroke-dasharray="4 3"') == len(scene.vehicles)

    def test_empty_scene_final_frame(self):
        _, frames, svgs = track("empty-occlusions")
        assert count_ellipses(svgs[0]) > 0
        assert count_ellipses(svgs[-1]) == 0

    def test_deterministic(self, reveal):
        _, frames, svgs = reveal
        again = render_tracking(frames, [p.traj.positions for p in reveal[0].pedestrians])
        assert again == svgs


class TestForecast:
    def test_panels_and_paths(self):
        r = np.random.default_rng(0)
        ctx = np.cumsum(r.normal(size=(5, 2)), axis=0)
        panels = [ForecastPanel(ctx, ctx[-1] + np.arange(1, 4)[:, None], r.normal(size=(7, 3, 2)), f"c{i}")
                  for i in range(3)]
        svg = render_forecast(panels)
        root = ET.fromstring(svg)
        assert root.get("width") == str(3 * 420)
        assert svg.count('class="sample"') == 21
        assert svg.count('class="truth"') == 3

    def test_identical_samples_give_identical_paths(self):
        path = np.cumsum(np.ones((4, 2)), axis=0)
        svg = render_forecast([ForecastPanel(np.zeros((1, 2)), path, np.stack([path] * 5))])
        drawn = re.findall(r'<polyline points="([^"]+)"[^>]*class="sample"', svg)
        assert len(drawn) == 5 and len(set(drawn)) == 1

    def test_no_panels(self):
        with pytest.raises(ValueError):
            render_forecast([])
