"""Synthetic traffic scenes, the benchmark trajectory generator, frames and I/O.

Two kinds of synthetic data live here.  ``generate_benchmark`` draws vehicle
tracks from a hand-specified four-regime rSLDS (straight, accelerate, turn
left, turn right) so learned models can be scored against known dynamics.
``generate_scene`` builds short scripted street scenes with parked or moving
vehicles, an ego car and pedestrians, together with their ground-truth
visibility, for the occlusion tracker.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from .geometry import DEFAULT_RANGE, OrientedBox, Pose2D, build_occlusion_polygon, point_in_polygon
from .rslds.model import RSLDSModel, make_model, simulate
from .trajectory import DT, Trajectory, wrap_angle

SCENE_KINDS = (
    "straight-corridor-parked-cars",
    "turning-intersection",
    "reveal-behind-parked",
    "reveal-behind-moving",
    "empty-occlusions",
)
SCENE_FORMAT = "switchdyn-scene"
SCENE_VERSION = 1
CSV_COLUMNS = ("t", "agent_id", "kind", "x", "y", "vx", "vy", "heading")


class SceneFormatError(ValueError):
    """A scene file failed to parse or validate; ``pointer`` locates the problem."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


def _rot(h: float) -> np.ndarray:
    c, s = math.cos(h), math.sin(h)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class FrameTransform:
    """Egocentric frame anchored at ``origin``: the origin pose maps to (0, 0) facing +x."""

    origin: Pose2D

    @classmethod
    def from_trajectory(cls, traj: Trajectory, t: int = 0) -> "FrameTransform":
        x, y = traj.states[t, :2]
        return cls(Pose2D(float(x), float(y), float(traj.heading[t])))

    def points_to_local(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=float) - self.origin.position) @ _rot(self.origin.heading)

    def vectors_to_local(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ _rot(self.origin.heading)

    def points_to_world(self, q) -> np.ndarray:
        return np.asarray(q, dtype=float) @ _rot(self.origin.heading).T + self.origin.position

    def vectors_to_world(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ _rot(self.origin.heading).T


def _map_traj(traj: Trajectory, pts, vecs, dh: float) -> Trajectory:
    states = np.concatenate([pts(traj.states[:, :2]), vecs(traj.states[:, 2:])], axis=1)
    return Trajectory(states, wrap_angle(traj.heading + dh), traj.dt, traj.kind, traj.agent_id, dict(traj.meta))


def to_egocentric(traj: Trajectory, frame: FrameTransform) -> Trajectory:
    """Express a world-frame trajectory in ``frame``; velocities are rotated, not shifted."""
    return _map_traj(traj, frame.points_to_local, frame.vectors_to_local, -frame.origin.heading)


def from_egocentric(traj: Trajectory, frame: FrameTransform) -> Trajectory:
    """Inverse of :func:`to_egocentric`."""
    return _map_traj(traj, frame.points_to_world, frame.vectors_to_world, frame.origin.heading)


def change_frame(traj: Trajectory, src: FrameTransform, dst: FrameTransform) -> Trajectory:
    return to_egocentric(from_egocentric(traj, src), dst)


# ---------------------------------------------------------------------------
# benchmark generator
# ---------------------------------------------------------------------------

STRAIGHT, ACCELERATE, TURN_LEFT, TURN_RIGHT = range(4)
REGIME_NAMES = ("straight", "accelerate", "turn-left", "turn-right")


def benchmark_model(dt: float = DT, turn_rate: float = 0.45, accel: float = 0.15, lateral_speed: float = 3.0,
                    gain: float = 6.0) -> RSLDSModel:
    """Hand-specified four-regime vehicle model used as the benchmark ground truth.

    Regimes act on the velocity: keep it, scale it up by ``accel`` per second,
    or rotate it at ``turn_rate`` rad/s to either side.  The manoeuvre is
    chosen at the first step and the model then drifts back to straight
    driving through state-dependent switches: a turn ends once the lateral
    speed passes ``lateral_speed`` (so slow vehicles keep circling), and
    acceleration fades out above roughly 14 m/s.  ``gain`` sets how sharp the
    turn exit is, in logits per m/s.
    """
    blocks = [np.eye(2), (1.0 + accel * dt) * np.eye(2), _rot(turn_rate * dt), _rot(-turn_rate * dt)]
    A = np.zeros((4, 4, 4))
    for k, m in enumerate(blocks):
        A[k, :2, :2] = np.eye(2)
        A[k, :2, 2:] = dt * np.eye(2)
        A[k, 2:, 2:] = m
    Q = np.diag([1e-4, 1e-4, 2.5e-3, 2.5e-3])
    R = np.full((4, 4), -30.0)
    np.fill_diagonal(R, 0.0)
    R[ACCELERATE, STRAIGHT] = -3.0
    R[TURN_LEFT, STRAIGHT] = R[TURN_RIGHT, STRAIGHT] = -gain * lateral_speed
    W = np.zeros((4, 4))
    W[ACCELERATE, 2] = -1.5
    W[TURN_LEFT, 3] = -gain
    W[TURN_RIGHT, 3] = gain
    r = np.array([0.0, 18.0, 0.0, 0.0])
    pi0 = np.array([0.25, 0.25, 0.25, 0.25])
    return make_model(A, np.zeros(4), Q, R=R, W=W, r=r, pi0=pi0, Sigma0=100.0 * np.eye(4), dt=dt)


def generate_benchmark(n: int, seed: int = 0, T: int = 91, speed_range=(2.0, 12.0),
                       model: RSLDSModel | None = None) -> list[Trajectory]:
    """``n`` egocentric vehicle tracks of length ``T`` from :func:`benchmark_model`.

    Each track starts at the origin heading along +x with a uniform random
    speed; the generating regimes are stored in ``meta["regimes"]``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    model = benchmark_model() if model is None else model
    rng = np.random.default_rng(seed)
    init = np.zeros((n, 4))
    init[:, 2] = rng.uniform(*speed_range, size=n)
    states, regimes = simulate(model, T, rng, n=n, init=init)
    return [Trajectory(states[i], dt=model.dt, kind="vehicle", agent_id=f"veh{i:05d}",
                       meta={"regimes": regimes[i].tolist()}) for i in range(n)]


def split_dataset(items: Sequence, ratio: float = 0.7, seed: int = 0) -> tuple[list, list]:
    """Shuffled split; the first part gets ``ceil(ratio * N)`` items."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    items = list(items)
    if not items:
        raise ValueError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(len(items))
    n_train = math.ceil(ratio * len(items))
    return [items[i] for i in perm[:n_train]], [items[i] for i in perm[n_train:]]


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


@dataclass
class Vehicle:
    """A rectangular road user; its box follows the trajectory pose."""

    length: float
    width: float
    traj: Trajectory

    def box(self, t: int) -> OrientedBox:
        x, y = self.traj.states[t, :2]
        return OrientedBox(Pose2D(float(x), float(y), float(self.traj.heading[t])), self.length, self.width)


@dataclass
class Pedestrian:
    traj: Trajectory
    visible: np.ndarray  # (T,) bool, ground truth from geometry


@dataclass
class Scene:
    kind: str
    seed: int
    ego: Trajectory
    vehicles: list[Vehicle] = field(default_factory=list)
    pedestrians: list[Pedestrian] = field(default_factory=list)
    dt: float = DT
    range_: float = DEFAULT_RANGE

    @property
    def duration(self) -> int:
        return len(self.ego)

    def ego_pose(self, t: int) -> Pose2D:
        x, y = self.ego.states[t, :2]
        return Pose2D(float(x), float(y), float(self.ego.heading[t]))

    def boxes(self, t: int) -> list[OrientedBox]:
        return [v.box(t) for v in self.vehicles]

    def polygons(self, t: int):
        ego = self.ego_pose(t)
        return [build_occlusion_polygon(ego, b, self.range_) for b in self.boxes(t)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return scene_to_dict(self) == scene_to_dict(other)


def visibility_schedule(scene: Scene, positions: np.ndarray) -> np.ndarray:
    """Per-step visibility of a point track ``positions`` (T, 2) from the ego."""
    out = np.ones(scene.duration, dtype=bool)
    for t in range(scene.duration):
        for poly in scene.polygons(t):
            if point_in_polygon(positions[t], poly):
                out[t] = False
                break
    return out


def _straight_track(x0, y0, heading, speed, T, kind="vehicle", agent_id="0", dt=DT) -> Trajectory:
    t = np.arange(T) * dt
    c, s = math.cos(heading), math.sin(heading)
    states = np.stack([x0 + c * speed * t, y0 + s * speed * t,
                       np.full(T, c * speed), np.full(T, s * speed)], axis=1)
    return Trajectory(states, np.full(T, heading), dt, kind, agent_id)


def _parked(x, y, heading, T, agent_id) -> Vehicle:
    return Vehicle(4.5, 2.0, _straight_track(x, y, heading, 0.0, T, agent_id=agent_id))


def _turning_ego(T: int, speed: float, turn_start: float, radius: float, dt=DT) -> Trajectory:
    """Drive along +x, then a left quarter circle of ``radius``, then along +y."""
    arc = 0.5 * math.pi * radius
    d = speed * dt * np.arange(T)
    states = np.zeros((T, 4))
    heading = np.zeros(T)
    for i, s in enumerate(d):
        if s <= turn_start:
            x, y, h = s, 0.0, 0.0
        elif s <= turn_start + arc:
            a = (s - turn_start) / radius
            x, y, h = turn_start + radius * math.sin(a), radius * (1 - math.cos(a)), a
        else:
            x, y, h = turn_start + radius, radius + (s - turn_start - arc), 0.5 * math.pi
        states[i] = (x, y, speed * math.cos(h), speed * math.sin(h))
        heading[i] = h
    return Trajectory(states, heading, dt, "vehicle", "ego")


def _static_ped(p, T, agent_id) -> Trajectory:
    return Trajectory(np.tile([p[0], p[1], 0.0, 0.0], (T, 1)), np.zeros(T), DT, "pedestrian", agent_id)


def _hidden_start(scene: Scene, rng, lo, hi, tries=400, need_reveal=False, reveal_window=(3, 60)):
    """Sample a static pedestrian position hidden at t = 0 (and later revealed if asked)."""
    for _ in range(tries):
        p = rng.uniform(lo, hi)
        vis = visibility_schedule(scene, np.tile(p, (scene.duration, 1)))
        if vis[0]:
            continue
        if need_reveal:
            flips = np.flatnonzero(vis[1:] & ~vis[:-1]) + 1
            if flips.size == 0 or not reveal_window[0] <= flips[0] <= reveal_window[1]:
                continue
        return p
    raise RuntimeError("could not place a hidden pedestrian; scene geometry too restrictive")


def generate_scene(kind: str, seed: int = 0, duration: int = 91, range_: float = DEFAULT_RANGE) -> Scene:
    """Scripted street scene of the given ``kind``; a pure function of ``(kind, seed)``.

    Kinds
    -----
    straight-corridor-parked-cars
        Ego drives past three parked cars; one pedestrian strolls behind them.
    turning-intersection
        Ego turns left at an intersection past two parked cars; one pedestrian.
    reveal-behind-parked
        A standing pedestrian hidden behind a parked car comes into view as
        the ego drives by.
    reveal-behind-moving
        A pedestrian hidden behind a van is uncovered when the van drives on.
    empty-occlusions
        Parked cars with nobody behind them.
    """
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    rng = np.random.default_rng([seed, SCENE_KINDS.index(kind)])
    T = duration
    ego_speed = 5.0
    scene = Scene(kind, int(seed), _straight_track(0.0, 0.0, 0.0, ego_speed, T, agent_id="ego"), range_=range_)

    if kind == "straight-corridor-parked-cars":
        for j in range(3):
            scene.vehicles.append(_parked(10.0 + 9.0 * j + rng.uniform(-1, 1), 4.0 + rng.uniform(-0.2, 0.2),
                                          rng.uniform(-0.05, 0.05), T, f"car{j}"))
        p = _hidden_start(scene, rng, (9.0, 5.5), (14.0, 8.0))
        v = rng.uniform(-0.5, 0.5)
        states = np.tile([p[0], p[1], v, 0.0], (T, 1))
        states[:, 0] += v * DT * np.arange(T)
        scene.pedestrians.append(Pedestrian(Trajectory(states, None, DT, "pedestrian", "ped0"), np.ones(T, bool)))
    elif kind == "turning-intersection":
        scene.ego = _turning_ego(T, 4.0, 14.0 + rng.uniform(-1, 1), 8.0)
        scene.vehicles.append(_parked(9.0 + rng.uniform(-1, 1), 4.0, 0.0, T, "car0"))
        scene.vehicles.append(_parked(26.0, 16.0 + rng.uniform(-1, 1), 0.5 * math.pi, T, "car1"))
        p = _hidden_start(scene, rng, (8.0, 5.5), (13.0, 8.0))
        scene.pedestrians.append(Pedestrian(_static_ped(p, T, "ped0"), np.ones(T, bool)))
    elif kind == "reveal-behind-parked":
        cx = 10.0 + rng.uniform(-1, 1)
        scene.vehicles.append(_parked(cx, 4.0, 0.0, T, "car0"))
        p = _hidden_start(scene, rng, (cx + 1.5, 5.3), (cx + 4.0, 6.5), need_reveal=True)
        scene.pedestrians.append(Pedestrian(_static_ped(p, T, "ped0"), np.ones(T, bool)))
    elif kind == "reveal-behind-moving":
        scene.ego = _straight_track(0.0, 0.0, 0.0, 2.0, T, agent_id="ego")
        van = _straight_track(9.0 + rng.uniform(-0.5, 0.5), 3.5, 0.0, 4.5, T, agent_id="van0")
        scene.vehicles.append(Vehicle(6.0, 2.2, van))
        p = _hidden_start(scene, rng, (9.0, 5.2), (13.0, 7.0), need_reveal=True)
        scene.pedestrians.append(Pedestrian(_static_ped(p, T, "ped0"), np.ones(T, bool)))
    else:  # empty-occlusions
        n_cars = int(rng.integers(2, 4))
        for j in range(n_cars):
            scene.vehicles.append(_parked(9.0 + 8.0 * j + rng.uniform(-1, 1), 4.0 + rng.uniform(-0.2, 0.2),
                                          rng.uniform(-0.05, 0.05), T, f"car{j}"))

    for ped in scene.pedestrians:
        ped.visible = visibility_schedule(scene, ped.traj.positions)
    return scene


def scene_frames(scene: Scene):
    """Tracker input: ego pose, vehicle boxes and detections of visible pedestrians per step."""
    from .occlusion.tracker import StreamFrame

    frames = []
    for t in range(scene.duration):
        dets = tuple((p.traj.agent_id, float(p.traj.states[t, 0]), float(p.traj.states[t, 1]))
                     for p in scene.pedestrians if p.visible[t])
        frames.append(StreamFrame(t, scene.ego_pose(t), tuple(scene.boxes(t)), dets))
    return frames


# ---------------------------------------------------------------------------
# scene JSON
# ---------------------------------------------------------------------------

_TRACK = {
    "type": "object",
    "required": ["id", "states"],
    "properties": {
        "id": {"type": "string"},
        "states": {"type": "array", "minItems": 1,
                   "items": {"type": "array", "minItems": 4, "maxItems": 4, "items": {"type": "number"}}},
        "heading": {"type": "array", "items": {"type": "number"}},
    },
}

SCENE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format", "version", "kind", "dt", "ego", "vehicles", "pedestrians"],
    "properties": {
        "format": {"const": SCENE_FORMAT},
        "version": {"const": SCENE_VERSION},
        "units": {"type": "object"},
        "kind": {"type": "string"},
        "seed": {"type": "integer"},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "range": {"type": "number", "exclusiveMinimum": 0},
        "ego": _TRACK,
        "vehicles": {"type": "array", "items": {
            "allOf": [_TRACK, {"type": "object", "required": ["length", "width"], "properties": {
                "length": {"type": "number", "exclusiveMinimum": 0},
                "width": {"type": "number", "exclusiveMinimum": 0}}}]}},
        "pedestrians": {"type": "array", "items": {
            "allOf": [_TRACK, {"type": "object", "properties": {
                "visible": {"type": "array", "items": {"type": "boolean"}}}}]}},
    },
}


def _track_dict(traj: Trajectory) -> dict:
    return {"id": traj.agent_id, "states": traj.states.tolist(), "heading": traj.heading.tolist()}


def scene_to_dict(scene: Scene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "units": {"length": "m", "time": "s", "angle": "rad"},
        "kind": scene.kind,
        "seed": scene.seed,
        "dt": scene.dt,
        "range": scene.range_,
        "ego": _track_dict(scene.ego),
        "vehicles": [dict(_track_dict(v.traj), length=v.length, width=v.width) for v in scene.vehicles],
        "pedestrians": [dict(_track_dict(p.traj), visible=[bool(x) for x in p.visible])
                        for p in scene.pedestrians],
    }


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def _track_from(d: dict, where: str, kind: str, T: int, dt: float) -> Trajectory:
    states = np.asarray(d["states"], dtype=float)
    if states.shape[0] != T:
        raise SceneFormatError(f"expected {T} states, got {states.shape[0]}", f"{where}/states")
    heading = d.get("heading")
    if heading is not None and len(heading) != T:
        raise SceneFormatError(f"expected {T} headings, got {len(heading)}", f"{where}/heading")
    try:
        return Trajectory(states, None if heading is None else np.asarray(heading, dtype=float), dt, kind, d["id"])
    except ValueError as exc:
        raise SceneFormatError(str(exc), where) from exc


def scene_from_dict(data: dict) -> Scene:
    """Validate and decode a scene; errors carry a JSON-pointer location."""
    validator = jsonschema.Draft202012Validator(SCENE_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise SceneFormatError(err.message, _pointer(err.absolute_path))
    dt = float(data["dt"])
    T = len(data["ego"]["states"])
    ego = _track_from(data["ego"], "/ego", "vehicle", T, dt)
    vehicles = [Vehicle(float(v["length"]), float(v["width"]), _track_from(v, f"/vehicles/{i}", "vehicle", T, dt))
                for i, v in enumerate(data["vehicles"])]
    scene = Scene(data["kind"], int(data.get("seed", 0)), ego, vehicles, [], dt, float(data.get("range", DEFAULT_RANGE)))
    for i, p in enumerate(data["pedestrians"]):
        traj = _track_from(p, f"/pedestrians/{i}", "pedestrian", T, dt)
        if "visible" in p:
            if len(p["visible"]) != T:
                raise SceneFormatError(f"expected {T} visibility flags", f"/pedestrians/{i}/visible")
            vis = np.asarray(p["visible"], dtype=bool)
        else:
            vis = None
        scene.pedestrians.append(Pedestrian(traj, vis))
    for p in scene.pedestrians:
        if p.visible is None:
            p.visible = visibility_schedule(scene, p.traj.positions)
    return scene


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1))


def load_scene(path) -> Scene:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"invalid JSON ({exc.msg} at line {exc.lineno}, column {exc.colno})") from exc
    return scene_from_dict(data)


# ---------------------------------------------------------------------------
# trajectory CSV
# ---------------------------------------------------------------------------


def write_trajectories_csv(trajs: Sequence[Trajectory], path) -> None:
    """One row per agent and step with columns ``t, agent_id, kind, x, y, vx, vy, heading``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for traj in trajs:
            for t in range(len(traj)):
                x, y, vx, vy = traj.states[t]
                w.writerow([t, traj.agent_id, traj.kind, repr(float(x)), repr(float(y)), repr(float(vx)),
                            repr(float(vy)), repr(float(traj.heading[t]))])


def read_trajectories_csv(path, dt: float = DT) -> list[Trajectory]:
    """Inverse of :func:`write_trajectories_csv`; agents keep their first-seen order."""
    rows: dict[str, list] = {}
    kinds: dict[str, str] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"trajectory CSV lacks columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                rec = (int(row["t"]), *(float(row[c]) for c in ("x", "y", "vx", "vy", "heading")))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"line {line}: {exc}") from exc
            rows.setdefault(row["agent_id"], []).append(rec)
            kinds[row["agent_id"]] = row["kind"]
    out = []
    for aid, recs in rows.items():
        recs.sort(key=lambda r: r[0])
        arr = np.asarray(recs, dtype=float)
        if not np.array_equal(arr[:, 0], np.arange(arr.shape[0])):
            raise ValueError(f"agent {aid!r}: steps must run 0, 1, ... without gaps")
        out.append(Trajectory(arr[:, 1:5], arr[:, 5], dt, kinds[aid], aid))
    return out
