"""Agent state and trajectory containers shared across the package."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DT = 0.1
AGENT_KINDS = ("vehicle", "pedestrian", "cyclist")


def wrap_angle(a):
    """Wrap angles into [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class AgentState:
    """Pose and velocity of one agent at one step.

    The modelled feature vector is ``(x, y, vx, vy)``; heading rides along
    as metadata.
    """

    x: float
    y: float
    vx: float
    vy: float
    heading: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.vx, self.vy, self.heading)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("AgentState entries must be finite")
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))

    @property
    def features(self) -> np.ndarray:
        return np.array([self.x, self.y, self.vx, self.vy])

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.y, self.vx, self.vy, self.heading])

    @classmethod
    def from_features(cls, s, heading: float | None = None) -> "AgentState":
        s = np.asarray(s, dtype=float)
        if heading is None:
            heading = math.atan2(s[3], s[2]) if np.hypot(s[2], s[3]) > 1e-9 else 0.0
        return cls(float(s[0]), float(s[1]), float(s[2]), float(s[3]), float(heading))


@dataclass
class Trajectory:
    """Uniformly sampled agent track.

    ``states`` holds one ``(x, y, vx, vy)`` row per step; ``heading`` is a
    parallel array in radians.
    """

    states: np.ndarray
    heading: np.ndarray | None = None
    dt: float = DT
    kind: str = "vehicle"
    agent_id: str = "0"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != 4:
            raise ValueError("states must have shape (T, 4)")
        if self.states.shape[0] < 1:
            raise ValueError("trajectory needs at least one state")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("trajectory states must be finite")
        if self.heading is None:
            speed = np.hypot(self.states[:, 2], self.states[:, 3])
            h = np.arctan2(self.states[:, 3], self.states[:, 2])
            self.heading = np.where(speed > 1e-9, h, 0.0)
        self.heading = wrap_angle(np.asarray(self.heading, dtype=float))
        if self.heading.shape != (self.states.shape[0],):
            raise ValueError("heading must have one entry per state")
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    def state(self, t: int) -> AgentState:
        s = self.states[t]
        return AgentState(*map(float, s), float(self.heading[t]))

    def slice(self, start: int, stop: int | None = None) -> "Trajectory":
        return Trajectory(self.states[start:stop].copy(), self.heading[start:stop].copy(),
                          self.dt, self.kind, self.agent_id, dict(self.meta))
