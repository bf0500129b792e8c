"""Deterministic SVG figures for tracking beliefs and trajectory forecasts.

All drawing works from plain data: tracker frames are the dictionaries
produced by ``SceneBelief.to_dict`` (one per line in a history file) and
forecasts are arrays of positions.  Numbers are written with fixed
precision so identical inputs give byte-identical files.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import OrientedBox, Pose2D

HIDDEN_T0_STYLE = 'fill="none" stroke="#7a7a7a" stroke-width="1" stroke-dasharray="4 3"'
HIDDEN_NOW_STYLE = 'fill="#9db4d6" fill-opacity="0.35" stroke="#5b7fb3" stroke-width="0.8"'
VEHICLE_STYLE = 'fill="#d9d9d9" stroke="#333333" stroke-width="1"'
EGO_STYLE = 'fill="#f2b134" stroke="#333333" stroke-width="1"'
BELIEF_COLOR = "#c0392b"
SAMPLE_COLOR = "#2e86c1"


def _f(v: float) -> str:
    s = f"{float(v):.2f}"
    return "0.00" if s == "-0.00" else s


@dataclass(frozen=True)
class View:
    """World rectangle mapped onto a ``width`` x ``height`` pixel canvas with +y up."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float
    width: int = 600
    height: int = 600
    offset_x: float = 0.0

    @classmethod
    def fit(cls, points, width: int = 600, height: int = 600, margin: float = 2.0) -> "View":
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        pts = pts[np.all(np.isfinite(pts), axis=1)]
        if pts.size == 0:
            pts = np.zeros((1, 2))
        lo, hi = pts.min(axis=0) - margin, pts.max(axis=0) + margin
        span = max(hi[0] - lo[0], (hi[1] - lo[1]) * width / height, 1e-6)
        cx, cy = 0.5 * (lo + hi)
        half_w, half_h = 0.5 * span, 0.5 * span * height / width
        return cls(cx - half_w, cy - half_h, cx + half_w, cy + half_h, width, height)

    @property
    def scale(self) -> float:
        return self.width / (self.xmax - self.xmin)

    def px(self, p) -> tuple[float, float]:
        x, y = float(p[0]), float(p[1])
        return self.offset_x + (x - self.xmin) * self.scale, (self.ymax - y) * self.scale

    def shifted(self, dx: float) -> "View":
        return View(self.xmin, self.ymin, self.xmax, self.ymax, self.width, self.height, self.offset_x + dx)


def _points(view: View, pts) -> str:
    return " ".join(f"{_f(x)},{_f(y)}" for x, y in (view.px(p) for p in pts))


def polygon(view: View, vertices, style: str) -> str:
    return f'<polygon points="{_points(view, vertices)}" {style}/>'


def polyline(view: View, pts, style: str) -> str:
    return f'<polyline points="{_points(view, pts)}" fill="none" {style}/>'


def cross(view: View, p, size: float = 5.0, style: str = 'stroke="#000000" stroke-width="1.5"') -> str:
    x, y = view.px(p)
    return (f'<path d="M{_f(x - size)},{_f(y - size)} L{_f(x + size)},{_f(y + size)} '
            f'M{_f(x - size)},{_f(y + size)} L{_f(x + size)},{_f(y - size)}" {style}/>')


def covariance_ellipse(mean, cov, nsig: float = 2.0) -> tuple[float, float, float, float, float]:
    """Centre, semi-axes and rotation (degrees, counter-clockwise) of the ``nsig`` contour."""
    cov = np.asarray(cov, dtype=float)
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    w = np.maximum(w, 0.0)
    angle = float(np.degrees(np.arctan2(v[1, 1], v[0, 1])))
    return float(mean[0]), float(mean[1]), nsig * float(np.sqrt(w[1])), nsig * float(np.sqrt(w[0])), angle


def ellipse(view: View, mean, cov, opacity: float, nsig: float = 2.0, color: str = BELIEF_COLOR) -> str:
    cx, cy, rx, ry, angle = covariance_ellipse(mean, cov, nsig)
    x, y = view.px((cx, cy))
    s = view.scale
    # the canvas flips y, so a counter-clockwise world angle is clockwise on screen
    return (f'<ellipse cx="{_f(x)}" cy="{_f(y)}" rx="{_f(max(rx * s, 0.5))}" ry="{_f(max(ry * s, 0.5))}" '
            f'transform="rotate({_f(-angle)} {_f(x)} {_f(y)})" fill="{color}" fill-opacity="{float(opacity) * 0.25:.3f}" '
            f'stroke="{color}" stroke-opacity="{float(opacity):.3f}" stroke-width="1.2" class="belief"/>')


def _document(width: int, height: int, body: list[str], title: str = "") -> str:
    head = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>']
    if title:
        head.append(f'<text x="8" y="16" font-family="sans-serif" font-size="12">{title}</text>')
    return "\n".join(head + body + ["</svg>"]) + "\n"


def save_svg(svg: str, path) -> None:
    Path(path).write_text(svg)


# ---------------------------------------------------------------------------
# tracking frames
# ---------------------------------------------------------------------------


def _box_corners(obj) -> np.ndarray:
    x, y, h, length, width = obj
    return OrientedBox(Pose2D(x, y, h), length, width).corners()


def frame_extent(frames: Sequence[dict], pedestrians=None) -> np.ndarray:
    """All points a set of tracking frames draws, for fitting a shared view."""
    pts = []
    for fr in frames:
        pts.append(np.asarray(fr["ego"][:2], dtype=float)[None])
        for obj in fr["objects"]:
            pts.append(_box_corners(obj))
        for poly in fr["polygons"]:
            pts.append(np.asarray(poly, dtype=float))
    if pedestrians is not None:
        pts.append(np.asarray(pedestrians, dtype=float).reshape(-1, 2))
    return np.concatenate(pts) if pts else np.zeros((1, 2))


def render_tracking_frame(frame: dict, initial_polygons, view: View, pedestrians=(), ego_size=(4.5, 1.8),
                          title: str = "") -> str:
    """One tracker step.

    Hidden regions at the first step are dashed outlines and the current
    ones are filled; vehicles are boxes, the ego is the highlighted box and
    ``pedestrians`` (ground-truth positions) are crosses.  Each live slot is
    drawn as its two-sigma position ellipse with opacity equal to its
    existence belief; dead slots are not drawn.
    """
    body = [polygon(view, p, HIDDEN_T0_STYLE) for p in initial_polygons]
    body += [polygon(view, p, HIDDEN_NOW_STYLE) for p in frame["polygons"]]
    body += [polygon(view, _box_corners(o), VEHICLE_STYLE) for o in frame["objects"]]
    ex, ey, eh = frame["ego"]
    body.append(polygon(view, _box_corners((ex, ey, eh) + tuple(ego_size)), EGO_STYLE + ' class="ego"'))
    body += [cross(view, p) for p in pedestrians]
    for slot in frame["slots"]:
        if slot["dead"]:
            continue
        pos = slot["position"]
        body.append(ellipse(view, pos["mean"], pos["cov"], slot["existence"]))
    return _document(view.width, view.height, body, title)


def render_tracking(frames: Sequence[dict], pedestrians=None, width: int = 600, height: int = 600) -> list[str]:
    """Frames of a whole tracking run on one shared view.

    ``pedestrians`` is an optional list of (T, 2) ground-truth tracks.
    """
    tracks = [np.asarray(p, dtype=float) for p in (pedestrians or [])]
    allped = np.concatenate(tracks) if tracks else None
    view = View.fit(frame_extent(frames, allped), width, height)
    initial = frames[0]["polygons"] if frames else []
    out = []
    for i, fr in enumerate(frames):
        peds = [tr[min(i, len(tr) - 1)] for tr in tracks]
        out.append(render_tracking_frame(fr, initial, view, peds, title=f"t = {fr['t']}"))
    return out


def count_ellipses(svg: str) -> int:
    return svg.count('class="belief"')


# ---------------------------------------------------------------------------
# forecasts
# ---------------------------------------------------------------------------


@dataclass
class ForecastPanel:
    """Context and ground truth (N, 2) plus sampled futures (S, H, 2) for one panel."""

    context: np.ndarray
    truth: np.ndarray
    samples: np.ndarray
    title: str = ""


def render_forecast(panels: Sequence[ForecastPanel], width: int = 420, height: int = 420,
                    max_paths: int = 300) -> str:
    """Side-by-side panels of sampled futures over the observed context and the truth."""
    if not panels:
        raise ValueError("no panels to draw")
    pts = np.concatenate([np.concatenate([np.asarray(p.context).reshape(-1, 2), np.asarray(p.truth).reshape(-1, 2),
                                          np.asarray(p.samples)[..., :2].reshape(-1, 2)]) for p in panels])
    base = View.fit(pts, width, height)
    body = []
    for i, p in enumerate(panels):
        view = base.shifted(i * width)
        body.append(f'<rect x="{i * width}" y="0" width="{width}" height="{height}" fill="none" stroke="#bbbbbb"/>')
        for path in np.asarray(p.samples)[:max_paths, :, :2]:
            body.append(polyline(view, path, f'stroke="{SAMPLE_COLOR}" stroke-opacity="0.15" stroke-width="1" '
                                             'class="sample"'))
        truth = np.asarray(p.truth)[:, :2]
        ctx = np.asarray(p.context)[:, :2]
        if len(truth):
            body.append(polyline(view, np.concatenate([ctx[-1:], truth]),
                                 'stroke="#27ae60" stroke-width="2" stroke-dasharray="5 3" class="truth"'))
        body.append(polyline(view, ctx if len(ctx) > 1 else np.repeat(ctx, 2, axis=0),
                             'stroke="#000000" stroke-width="2.5" class="context"'))
        if p.title:
            body.append(f'<text x="{i * width + 8}" y="16" font-family="sans-serif" font-size="12">{p.title}</text>')
    return _document(width * len(panels), height, body)
