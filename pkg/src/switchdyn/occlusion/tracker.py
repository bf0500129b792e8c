"""Slot-based tracking of possibly occluded pedestrians.

Each slot ``m`` carries an existence variable ``I_m`` and a position ``s_m``.
Detections arrive in ``L = M`` observation rows; a row with flag 1 is
explained by a slot chosen uniformly at random (``c_l``).  The flag
likelihood is a softened version of the deterministic rule "detected iff the
pedestrian exists and is visible":

* a detection explained by slot ``m`` has likelihood ``(1 - eps) N(o; s_m, var I)``
  when ``I_m = 1`` and ``s_m`` is visible, ``eps N(o; s_m, var I)`` when it is
  hidden, and ``eps * kappa`` when ``I_m = 0`` (``kappa`` is the peak of the
  detection density, so a ghost detection is not penalised by its distance to
  the padding value);
* a slot that explains no detection contributes ``eps`` if it exists and is
  visible, ``1 - eps`` otherwise.

The posterior is approximated by ``prod_m Q(I_m) Q(s_m | I_m) prod_l Q(c_l)``
and refined by coordinate ascent on the evidence lower bound.  Visibility at
step ``t`` is judged against the union of the current occlusion polygons;
memory of earlier views lives in the support of each position belief, so a
slot hidden now but seen empty before keeps only a small leak of mass there.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit, logit

from ..gaussians import LOG_2PI
from ..geometry import DEFAULT_RANGE, ConvexPolygon, OrientedBox, Pose2D, build_occlusion_polygon, \
    polygon_gaussian_moments
from .beliefs import GridBelief, SupportGaussian, TiltedGaussian
from .regions import HiddenRegion

log = logging.getLogger(__name__)


class ELBODecreaseError(RuntimeError):
    """A coordinate-ascent sweep lowered the bound; indicates an update bug."""


class StreamError(ValueError):
    """Malformed tracking input stream."""


@dataclass(frozen=True)
class TrackerConfig:
    padding: tuple = (1e4, 1e4)
    pad_var: float = 1e-4
    prior_existence: float = 0.5
    obs_std: float = 0.1
    proc_std: float = 0.05
    eps: float = 1e-6
    kill_threshold: float = 0.02
    sweeps: int = 5
    range: float = DEFAULT_RANGE
    slots_per_region: int = 2
    object_std: float = 0.01
    monotone_tol: float = 1e-6
    leak: float = 0.01

    @property
    def obs_var(self) -> float:
        return self.obs_std**2

    @property
    def log_kappa(self) -> float:
        # peak of the 2-D detection density
        return -LOG_2PI - np.log(self.obs_var)


@dataclass(frozen=True)
class ObservationSlot:
    index: int
    flag: int
    position: tuple

    def __post_init__(self):
        if self.flag not in (0, 1):
            raise ValueError("observation flag must be 0 or 1")


def make_observations(detections, num_slots: int, config: TrackerConfig = TrackerConfig()) -> list[ObservationSlot]:
    """Fill ``num_slots`` observation rows: detections first, padding afterwards."""
    detections = [tuple(map(float, d)) for d in detections]
    if len(detections) > num_slots:
        warnings.warn(f"{len(detections)} detections for {num_slots} slots; extra detections dropped",
                      RuntimeWarning, stacklevel=2)
        detections = detections[:num_slots]
    rows = [ObservationSlot(i, 1, d) for i, d in enumerate(detections)]
    rows += [ObservationSlot(i, 0, tuple(config.padding)) for i in range(len(rows), num_slots)]
    return rows


@dataclass(frozen=True)
class PedestrianSlot:
    """One hypothesised pedestrian.

    ``existence`` and ``position`` are the current posterior factors
    ``Q(I=1)`` and ``Q(s | I=1)``; ``prior_existence`` and ``prior_position``
    are the predicted beliefs they were updated from.
    """

    index: int
    existence: float
    position: SupportGaussian | TiltedGaussian | GridBelief
    region_id: int
    prior_existence: float
    prior_position: SupportGaussian | GridBelief
    dead: bool = False

    def padding_belief(self, config: TrackerConfig) -> SupportGaussian:
        return SupportGaussian.gaussian(np.array(config.padding, dtype=float), config.pad_var * np.eye(2))


@dataclass(frozen=True)
class SceneBelief:
    ego: Pose2D
    objects: tuple
    slots: tuple
    associations: np.ndarray  # (L, M)
    t: int = 0
    polygons: tuple = ()
    prev_polygons: tuple = ()
    config: TrackerConfig = field(default_factory=TrackerConfig)

    @property
    def num_slots(self) -> int:
        return len(self.slots)

    def hidden_region(self) -> HiddenRegion:
        return HiddenRegion.union(self.polygons)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "ego": [self.ego.x, self.ego.y, self.ego.heading],
            "objects": [[b.center.x, b.center.y, b.center.heading, b.length, b.width] for b in self.objects],
            "polygons": [p.to_list() for p in self.polygons],
            "slots": [{"index": s.index, "region": s.region_id, "existence": float(s.existence), "dead": bool(s.dead),
                       "position": s.position.to_dict()} for s in self.slots],
            "associations": np.asarray(self.associations).tolist(),
        }


def observation_flag(I: int, visible: int) -> int:
    """Detection flag of a pedestrian: 1 iff it exists and is visible."""
    return int(bool(I) and bool(visible))


def occlusion_polygons(ego: Pose2D, objects: Sequence[OrientedBox], range_: float = DEFAULT_RANGE) -> tuple:
    return tuple(build_occlusion_polygon(ego, b, range_) for b in objects)


def _split_offsets(n: int) -> np.ndarray:
    return np.zeros(1) if n == 1 else np.linspace(-0.6, 0.6, n)


def init_slots(ego: Pose2D, occluders: Sequence[OrientedBox], slots_per_region: int = 2,
               prior_existence: float = 0.5, config: TrackerConfig | None = None,
               regions: Sequence[ConvexPolygon] | None = None) -> SceneBelief:
    """Allocate ``slots_per_region`` slots behind each occluder.

    With one slot per region its position belief carries the mean and
    covariance of the uniform density on the region.  Several slots split
    those moments along the principal axis so that the mixture of slot
    beliefs keeps the region's mean and covariance; this breaks the symmetry
    between otherwise identical slots.
    """
    if slots_per_region < 1:
        raise ValueError("slots_per_region must be at least 1")
    config = replace(config or TrackerConfig(), slots_per_region=slots_per_region,
                     prior_existence=prior_existence)
    occluders = tuple(occluders)
    polys = tuple(regions) if regions is not None else occlusion_polygons(ego, occluders, config.range)
    slots = []
    for rid, poly in enumerate(polys):
        g = polygon_gaussian_moments(poly)
        w, v = np.linalg.eigh(g.cov)
        axis, lam = v[:, -1], w[-1]
        offsets = _split_offsets(slots_per_region)
        shrink = np.mean(offsets**2) * lam * np.outer(axis, axis)
        for off in offsets:
            b = SupportGaussian.gaussian(g.mean + off * np.sqrt(lam) * axis, g.cov - shrink)
            slots.append(PedestrianSlot(len(slots), prior_existence, b, rid, prior_existence, b))
    M = len(slots)
    assoc = np.full((M, M), 1.0 / M) if M else np.zeros((0, 0))
    return SceneBelief(ego, occluders, tuple(slots), assoc, 0, polys, polys, config)


def predict_step(belief: SceneBelief, ego_motion: Pose2D, objects: Sequence[OrientedBox] | None = None,
                 proc_std: float | None = None) -> SceneBelief:
    """Advance one step under constant-position pedestrian dynamics.

    ``ego_motion`` is a world-frame displacement of the ego pose.  Existence
    beliefs are carried over unchanged and position beliefs are widened by
    the process noise.
    """
    cfg = belief.config
    sd = cfg.proc_std if proc_std is None else proc_std
    ego = Pose2D(belief.ego.x + ego_motion.x, belief.ego.y + ego_motion.y, belief.ego.heading + ego_motion.heading)
    objects = belief.objects if objects is None else tuple(objects)
    polys = occlusion_polygons(ego, objects, cfg.range)
    slots = []
    for s in belief.slots:
        if s.dead:
            slots.append(replace(s, prior_position=s.position))
            continue
        if isinstance(s.position, TiltedGaussian):
            pos = s.position.predict(sd**2, cfg.leak)
        else:
            pos = s.position.predict(sd**2)
        slots.append(replace(s, position=pos, prior_position=pos, prior_existence=s.existence))
    return replace(belief, ego=ego, objects=objects, slots=tuple(slots), t=belief.t + 1, polygons=polys,
                   prev_polygons=belief.polygons)


# ---------------------------------------------------------------------------
# variational pieces
# ---------------------------------------------------------------------------


@dataclass
class _Work:
    """Per-update scratch: detections in canonical order and factor values."""

    obs: np.ndarray  # (n, 2)
    W: np.ndarray  # (n, M) association weights for detection rows
    rho: np.ndarray  # (M,)
    pos: list
    hidden: np.ndarray  # (M,) hidden mass of each position factor
    ell: np.ndarray  # (n, M) E[log N(o_l; s_m)]


def _log_terms(cfg: TrackerConfig):
    eps = cfg.eps
    return np.log(eps), np.log1p(-eps)


def _slot_alphas(cfg, w_col, u):
    le, l1e = _log_terms(cfg)
    ws = float(np.sum(w_col))
    alpha_v = ws * l1e + u * le
    alpha_r = ws * le + u * l1e
    return alpha_v, alpha_r


def _missed_weight(W: np.ndarray) -> np.ndarray:
    """Probability under ``Q(c)`` that no detection row picks each slot."""
    if W.shape[0] == 0:
        return np.ones(W.shape[1])
    return np.prod(1.0 - W, axis=0)


def _existence_terms(cfg, slot_pos, prior_pos, obs, w_col, u, hidden, ell):
    """Local objectives for ``I = 1`` and ``I = 0`` of one slot."""
    le, l1e = _log_terms(cfg)
    alpha_v, alpha_r = _slot_alphas(cfg, w_col, u)
    f1 = -slot_pos.kl(prior_pos) + float(w_col @ ell) + alpha_v + (alpha_r - alpha_v) * hidden
    f0 = float(np.sum(w_col)) * (le + cfg.log_kappa) + u * l1e
    return f1, f0


def _clip_prob(p: float) -> float:
    return float(np.clip(p, 1e-300, 1 - 1e-16))


def _bernoulli_kl(q, p):
    p = _clip_prob(p)
    out = 0.0
    for a, b in ((q, p), (1.0 - q, 1.0 - p)):
        if a > 0:
            out += a * (np.log(a) - np.log(b))
    return out


def _elbo(cfg: TrackerConfig, slots, work: _Work, num_objects: int) -> float:
    M = len(slots)
    val = num_objects * (-LOG_2PI - 2.0 * np.log(cfg.object_std))
    if M == 0:
        return float(val)
    W = work.W
    u = _missed_weight(W)
    for m, s in enumerate(slots):
        rho = work.rho[m]
        f1, f0 = _existence_terms(cfg, work.pos[m], s.prior_position, work.obs, W[:, m], u[m], work.hidden[m],
                                  work.ell[:, m])
        val += -_bernoulli_kl(rho, s.prior_existence) + rho * f1 + (1.0 - rho) * f0
    if W.size:
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(W > 0, -W * np.log(W), 0.0)
        val += float(np.sum(ent)) - W.sum() * np.log(M)
    return float(val)


def _canonical_order(obs: np.ndarray) -> np.ndarray:
    return np.lexsort((obs[:, 1], obs[:, 0])) if obs.shape[0] else np.zeros(0, dtype=int)


def _detection_rows(observations: Sequence[ObservationSlot], M: int):
    if len(observations) != M:
        raise ValueError(f"expected {M} observation rows, got {len(observations)}")
    idx = [i for i, o in enumerate(observations) if o.flag == 1]
    obs = np.array([observations[i].position for i in idx], dtype=float).reshape(-1, 2)
    order = _canonical_order(obs)
    return np.asarray(idx, dtype=int)[order], obs[order]


def _refresh(work: _Work, m: int, region: HiddenRegion, var: float):
    work.hidden[m] = work.pos[m].hidden_mass(region)
    if work.obs.shape[0]:
        work.ell[:, m] = work.pos[m].expected_obs_loglik(work.obs, var)


def _update_associations(cfg, work: _Work, region: HiddenRegion):
    n, M = work.W.shape
    le, l1e = _log_terms(cfg)
    e_l1 = l1e * (1.0 - work.hidden) + le * work.hidden
    e_l0 = le * (1.0 - work.hidden) + l1e * work.hidden
    e0 = work.rho * e_l0 + (1.0 - work.rho) * l1e
    for l in range(n):
        a = work.rho * (e_l1 + work.ell[l]) + (1.0 - work.rho) * (le + cfg.log_kappa)
        others = np.prod(np.delete(1.0 - work.W, l, axis=0), axis=0) if n > 1 else np.ones(M)
        logits = a - others * e0
        logits -= logits.max()
        p = np.exp(logits)
        work.W[l] = p / p.sum()


def _initial_associations(cfg, work: _Work, region: HiddenRegion):
    """Responsibilities of the collapsed association model (PDA weights)."""
    n, M = work.W.shape
    if n == 0:
        return
    le, l1e = _log_terms(cfg)
    vis = np.where(region.contains(work.obs), le, l1e) if not region.is_empty else np.full(n, l1e)
    for m in range(M):
        lm = work.pos[m].marginal_obs_loglik(work.obs, cfg.obs_var) + vis
        r = work.rho[m]
        with np.errstate(divide="ignore"):
            work.W[:, m] = np.logaddexp(np.log(r) + lm, np.log1p(-r) + le + cfg.log_kappa)
    work.W -= work.W.max(axis=1, keepdims=True)
    work.W = np.exp(work.W)
    work.W /= work.W.sum(axis=1, keepdims=True)


def _update_positions(cfg, slots, work: _Work, region: HiddenRegion):
    u = _missed_weight(work.W)
    for m, s in enumerate(slots):
        if s.dead:
            continue
        w_col = work.W[:, m]
        alpha_v, alpha_r = _slot_alphas(cfg, w_col, u[m])
        new, _ = work.pos[m].update(s.prior_position, work.obs, w_col, cfg.obs_var, alpha_v, alpha_r, region)
        work.pos[m] = new
        _refresh(work, m, region, cfg.obs_var)


def _update_existence(cfg, slots, work: _Work):
    u = _missed_weight(work.W)
    for m, s in enumerate(slots):
        if s.dead:
            continue
        f1, f0 = _existence_terms(cfg, work.pos[m], s.prior_position, work.obs, work.W[:, m], u[m],
                                  work.hidden[m], work.ell[:, m])
        p = _clip_prob(s.prior_existence)
        work.rho[m] = float(expit(logit(p) + f1 - f0))


def _as_posterior(pos, region: HiddenRegion):
    """Express a position factor as a tilt relative to ``region`` (identity tilt if needed)."""
    if isinstance(pos, SupportGaussian):
        return pos.tilt(np.zeros((0, 2)), np.zeros(0), 1.0, 0.0, 0.0, region)
    if isinstance(pos, TiltedGaussian) and pos.region != region:
        raise ValueError("position factor was tilted against a different hidden region")
    return pos


def _initial_work(belief: SceneBelief, obs: np.ndarray, region: HiddenRegion) -> _Work:
    M = belief.num_slots
    n = obs.shape[0]
    work = _Work(obs, np.full((n, M), 1.0 / M), np.array([s.existence for s in belief.slots], dtype=float),
                 [_as_posterior(s.position, region) for s in belief.slots], np.zeros(M), np.zeros((n, M)))
    for m in range(M):
        _refresh(work, m, region, belief.config.obs_var)
    return work


def _assemble(belief: SceneBelief, work: _Work, rows: np.ndarray, kill: bool) -> SceneBelief:
    M = belief.num_slots
    assoc = np.full((M, M), 1.0 / M)
    assoc[rows] = work.W
    slots = []
    for m, s in enumerate(belief.slots):
        if s.dead:
            slots.append(s)
            continue
        pos = work.pos[m]
        dead = kill and work.rho[m] < belief.config.kill_threshold
        if dead:
            # frozen from here on; drop the region-specific tilt
            pos = SupportGaussian.gaussian(pos.mean, pos.cov)
        slots.append(replace(s, existence=float(work.rho[m]), position=pos, dead=dead))
    return replace(belief, slots=tuple(slots), associations=assoc)


def _hard_start(work: _Work) -> _Work | None:
    """Copy of ``work`` whose associations are the best one-to-one assignment under ``work.W``.

    Returns None when there is nothing to disambiguate.
    """
    n, M = work.W.shape
    if n == 0 or M < 2:
        return None
    with np.errstate(divide="ignore"):
        cost = -np.log(np.maximum(work.W, 1e-300))
    rows, cols = linear_sum_assignment(cost)
    W = np.zeros_like(work.W)
    W[rows, cols] = 1.0
    if np.allclose(W, work.W):
        return None
    return _Work(work.obs, W, work.rho.copy(), list(work.pos), work.hidden.copy(), work.ell.copy())


def _ascend(cfg, belief: SceneBelief, work: _Work, region: HiddenRegion, sweeps: int, check: bool) -> list[float]:
    trace = [_elbo(cfg, belief.slots, work, len(belief.objects))]
    for sweep in range(sweeps):
        _update_positions(cfg, belief.slots, work, region)
        _update_existence(cfg, belief.slots, work)
        _update_associations(cfg, work, region)
        trace.append(_elbo(cfg, belief.slots, work, len(belief.objects)))
        drop = trace[-2] - trace[-1]
        if check and drop > cfg.monotone_tol * max(1.0, abs(trace[-2])):
            raise ELBODecreaseError(f"bound decreased by {drop:.3e} in sweep {sweep} at step {belief.t}")
    return trace


def update_step(belief: SceneBelief, observations: Sequence[ObservationSlot], sweeps: int | None = None,
                check: bool = True) -> tuple[SceneBelief, list[float]]:
    """Coordinate-ascent refinement of the slot beliefs given one step of observations.

    The association factors start from the collapsed (PDA) responsibilities;
    the bound after that step is the first entry of the returned trace.  Each
    sweep then updates positions, existence and associations in turn and
    appends the bound.  Dead slots keep their factors fixed.

    With several slots and at least one detection, similar slots can split
    every detection between them and settle in a poor symmetric optimum.  A
    second ascent therefore starts from the best one-to-one assignment under
    the PDA responsibilities, and the run with the higher final bound is kept.
    """
    cfg = belief.config
    sweeps = cfg.sweeps if sweeps is None else sweeps
    M = belief.num_slots
    if M == 0:
        return belief, [scene_elbo(belief, observations)]
    rows, obs = _detection_rows(observations, M)
    region = belief.hidden_region()
    work = _initial_work(belief, obs, region)
    _initial_associations(cfg, work, region)
    alt = _hard_start(work)
    trace = _ascend(cfg, belief, work, region, sweeps, check)
    if alt is not None:
        alt_trace = _ascend(cfg, belief, alt, region, sweeps, check)
        if alt_trace[-1] > trace[-1]:
            work, trace = alt, alt_trace
    return _assemble(belief, work, rows, kill=True), trace


def scene_elbo(belief: SceneBelief, observations: Sequence[ObservationSlot]) -> float:
    """Evidence lower bound of the current factors for one step of observations."""
    cfg = belief.config
    M = belief.num_slots
    if M == 0:
        return float(len(belief.objects) * (-LOG_2PI - 2.0 * np.log(cfg.object_std)))
    idx = [i for i, o in enumerate(observations) if o.flag == 1]
    region = belief.hidden_region()
    obs = np.array([observations[i].position for i in idx], dtype=float).reshape(-1, 2)
    work = _initial_work(belief, obs, region)
    work.W = np.asarray(belief.associations, dtype=float)[idx].reshape(len(idx), M)
    return _elbo(cfg, belief.slots, work, len(belief.objects))


# ---------------------------------------------------------------------------
# filtering over a stream
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StreamFrame:
    """One time step of tracker input: ego pose, occluding vehicles, pedestrian detections."""

    t: int
    ego: Pose2D
    objects: tuple
    detections: tuple = ()  # (agent_id, x, y)


def run_filter(frames: Iterable[StreamFrame], config: TrackerConfig | None = None,
               check: bool = True) -> tuple[list[SceneBelief], list[list[float]]]:
    """Filter a stream frame by frame.

    Pedestrians detected in the first frame are treated as observed objects
    and their later detections are ignored; slots are allocated behind every
    vehicle at the first frame.  Returns the per-step beliefs and ELBO traces.
    """
    config = config or TrackerConfig()
    frames = list(frames)
    if not frames:
        raise StreamError("empty stream")
    for a, b in zip(frames, frames[1:]):
        if b.t != a.t + 1:
            raise StreamError(f"stream gap between steps {a.t} and {b.t}")
    first = frames[0]
    known = {d[0] for d in first.detections}
    belief = init_slots(first.ego, first.objects, config.slots_per_region, config.prior_existence, config)
    history, traces = [], []
    for i, fr in enumerate(frames):
        if i > 0:
            prev = belief.ego
            delta = Pose2D(fr.ego.x - prev.x, fr.ego.y - prev.y, fr.ego.heading - prev.heading)
            belief = predict_step(belief, delta, fr.objects)
            belief = replace(belief, ego=fr.ego)
        dets = [(d[1], d[2]) for d in fr.detections if d[0] not in known]
        rows = make_observations(dets, belief.num_slots, config)
        belief, trace = update_step(belief, rows, check=check)
        history.append(belief)
        traces.append(trace)
    return history, traces


def write_history(history: Sequence[SceneBelief], path) -> None:
    """One JSON object per line, one line per step."""
    with open(path, "w") as fh:
        for b in history:
            fh.write(json.dumps(b.to_dict(), sort_keys=True) + "\n")


def read_history(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
