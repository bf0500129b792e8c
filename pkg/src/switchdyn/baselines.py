"""Mixture-model trajectory baselines: a plain GMM over whole futures and a pose-conditioned variant.

Both models describe the positions at steps ``start, start + 1, ...`` of a
trajectory with ``k`` diagonal Gaussian components over the flattened
position sequence, so one component is one coherent future (an intent).
The conditional model adds affine heads, driven by the agent pose at the
last observed step, that shift the component means, log standard
deviations and mixing logits of a frozen base model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, logsumexp

from .gaussians import COV_FLOOR, LOG_2PI, fit_diag_gmm_batch
from .metrics import PredictiveMixture
from .trajectory import Trajectory

log = logging.getLogger(__name__)

POSE_FEATURES = ("x", "y", "vx", "vy", "heading")


def _future_block(trajs, start: int) -> np.ndarray:
    lengths = {len(t) for t in trajs}
    if len(lengths) != 1:
        raise ValueError(f"all trajectories must share one length, got {sorted(lengths)}")
    T = lengths.pop()
    if T <= start:
        raise ValueError(f"trajectories of length {T} have no steps after {start - 1}")
    return np.stack([t.positions[start:] for t in trajs])  # (N, T - start, 2)


@dataclass
class TrajectoryGMM:
    """Diagonal GMM over flattened positions at steps ``start .. start + steps - 1``.

    ``means`` and ``variances`` are (k, steps, 2); ``weights`` is (k,).
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    start: int = 1
    trace: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def steps(self) -> int:
        return self.means.shape[1]

    def supports_context(self, context_len: int) -> bool:
        return context_len >= self.start

    def window(self, first: int, horizon: int) -> tuple[slice, int]:
        off = first - self.start
        if off < 0 or off + horizon > self.steps:
            raise ValueError(f"steps {first}..{first + horizon - 1} lie outside the modelled window")
        return slice(off, off + horizon), off

    def predict(self, context: Trajectory, horizon: int, seed: int = 0) -> PredictiveMixture:
        """Per-step slices for the ``horizon`` steps after ``context`` (which is ignored otherwise)."""
        sl, _ = self.window(len(context), horizon)
        w = np.broadcast_to(self.weights, (horizon, self.k))
        return PredictiveMixture(w.copy(), np.swapaxes(self.means[:, sl], 0, 1), np.swapaxes(self.variances[:, sl], 0, 1))

    def log_likelihood(self, trajs) -> np.ndarray:
        x = _future_block(trajs, self.start)[:, : self.steps]
        return logsumexp(np.log(self.weights) + _component_loglik(x, self.means, 0.5 * np.log(self.variances)), axis=1)

    def to_dict(self) -> dict:
        return {"kind": "gmm", "start": self.start, "weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryGMM":
        return cls(np.asarray(d["weights"], float), np.asarray(d["means"], float), np.asarray(d["variances"], float),
                   int(d.get("start", 1)))


def fit_trajectory_gmm(trajs, k: int = 10, seed: int = 0, start: int = 1, floor: float = COV_FLOOR,
                       max_iters: int = 300, tol: float = 1e-7) -> TrajectoryGMM:
    """EM on flattened future positions of equally long trajectories."""
    trajs = list(trajs)
    if not trajs:
        raise ValueError("no training trajectories")
    x = _future_block(trajs, start)
    n, steps, _ = x.shape
    fit = fit_diag_gmm_batch(x.reshape(1, n, -1), k, seed=seed, floor=floor, max_iters=max_iters, tol=tol)
    trace = [float(v) for v in fit.log_likelihood[:, 0] if np.isfinite(v)]
    return TrajectoryGMM(fit.weights[0], fit.means[0].reshape(k, steps, 2), fit.variances[0].reshape(k, steps, 2),
                         start, trace)


def _component_loglik(x, means, log_std):
    """log N(x_n; mu_nk, diag exp(2 s_nk)) summed over steps and axes, (N, K).

    ``means``/``log_std`` are (K, S, 2) or per-sample (N, K, S, 2).
    """
    xk = x[:, None]
    z = (xk - means) * np.exp(-log_std)
    return -np.sum(0.5 * LOG_2PI + log_std + 0.5 * z**2, axis=(-2, -1))


# ---------------------------------------------------------------------------
# conditional GMM
# ---------------------------------------------------------------------------


def pose_features(state) -> np.ndarray:
    """``(x, y, vx, vy, heading)`` from an AgentState, a pose vector or a trajectory's last step."""
    if isinstance(state, Trajectory):
        return np.array([*state.states[-1], state.heading[-1]], dtype=float)
    if hasattr(state, "pose"):
        return np.asarray(state.pose, dtype=float)
    return np.asarray(state, dtype=float).reshape(len(POSE_FEATURES))


@dataclass
class ConditionalGMM:
    """A frozen :class:`TrajectoryGMM` plus affine residual heads on a pose.

    The pose is standardised with ``feat_mean`` / ``feat_std`` and extended by
    a constant 1, giving ``phi`` of length 6.  Heads map ``phi`` to residuals:
    ``head_mean`` (k, S, 2, 6), ``head_logstd`` (k, S, 2, 6) and
    ``head_logit`` (k, 6).  Zero heads reproduce the base model exactly.
    """

    base: TrajectoryGMM
    head_mean: np.ndarray
    head_logstd: np.ndarray
    head_logit: np.ndarray
    feat_mean: np.ndarray
    feat_std: np.ndarray
    context: int = 1
    trace: list = field(default_factory=list)

    @classmethod
    def zeros(cls, base: TrajectoryGMM, feat_mean=None, feat_std=None, context: int = 1) -> "ConditionalGMM":
        k, S = base.k, base.steps
        nf = len(POSE_FEATURES) + 1
        return cls(base, np.zeros((k, S, 2, nf)), np.zeros((k, S, 2, nf)), np.zeros((k, nf)),
                   np.zeros(nf - 1) if feat_mean is None else np.asarray(feat_mean, float),
                   np.ones(nf - 1) if feat_std is None else np.asarray(feat_std, float), context)

    def features(self, poses) -> np.ndarray:
        p = np.atleast_2d(np.asarray(poses, dtype=float))
        z = (p - self.feat_mean) / self.feat_std
        return np.concatenate([z, np.ones((z.shape[0], 1))], axis=1)

    def params(self) -> np.ndarray:
        return np.concatenate([self.head_mean.ravel(), self.head_logstd.ravel(), self.head_logit.ravel()])

    def with_params(self, theta: np.ndarray) -> "ConditionalGMM":
        a, b = self.head_mean.size, self.head_logstd.size
        return ConditionalGMM(self.base, theta[:a].reshape(self.head_mean.shape),
                              theta[a:a + b].reshape(self.head_logstd.shape),
                              theta[a + b:].reshape(self.head_logit.shape), self.feat_mean, self.feat_std,
                              self.context, list(self.trace))

    def parameters_for(self, poses):
        """Per-pose means (N, k, S, 2), log-stds (N, k, S, 2) and log-weights (N, k)."""
        phi = self.features(poses)
        base_ls = 0.5 * np.log(self.base.variances)
        means = self.base.means + np.einsum("ksdf,nf->nksd", self.head_mean, phi)
        log_std = base_ls + np.einsum("ksdf,nf->nksd", self.head_logstd, phi)
        logw = log_softmax(np.log(self.base.weights) + phi @ self.head_logit.T, axis=1)
        return means, log_std, logw

    def supports_context(self, context_len: int) -> bool:
        return context_len == self.context

    def predict(self, context: Trajectory, horizon: int, seed: int = 0) -> PredictiveMixture:
        return cgmm_predict(self, pose_features(context), first=len(context), horizon=horizon)

    def to_dict(self) -> dict:
        return {"kind": "cgmm", "base": self.base.to_dict(), "context": self.context,
                "head_mean": self.head_mean.tolist(), "head_logstd": self.head_logstd.tolist(),
                "head_logit": self.head_logit.tolist(), "feat_mean": self.feat_mean.tolist(),
                "feat_std": self.feat_std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionalGMM":
        arr = lambda key: np.asarray(d[key], dtype=float)  # noqa: E731
        return cls(TrajectoryGMM.from_dict(d["base"]), arr("head_mean"), arr("head_logstd"), arr("head_logit"),
                   arr("feat_mean"), arr("feat_std"), int(d.get("context", 1)))


def cgmm_predict(model: ConditionalGMM, pose0, first: int | None = None, horizon: int | None = None) -> PredictiveMixture:
    """Conditional per-step mixtures for one pose.

    ``first`` is the absolute index of the first predicted step (default: the
    base model's first step) and ``horizon`` the number of steps returned.
    """
    pose = pose_features(pose0)
    if not np.all(np.isfinite(pose)):
        raise ValueError("pose must be finite")
    first = model.base.start if first is None else first
    horizon = model.base.steps - (first - model.base.start) if horizon is None else horizon
    sl, _ = model.base.window(first, horizon)
    # residuals are applied multiplicatively so that zero heads give the base values bit for bit
    phi = model.features(pose[None])[0]
    base = model.base
    means = base.means + model.head_mean @ phi
    var = base.variances * np.exp(2.0 * (model.head_logstd @ phi))
    shift = model.head_logit @ phi
    scale = np.exp(shift - shift.max())
    w = base.weights if np.all(scale == 1.0) else base.weights * scale / np.sum(base.weights * scale)
    w = np.broadcast_to(w, (horizon, base.k))
    return PredictiveMixture(w, np.swapaxes(means[:, sl], 0, 1), np.swapaxes(var[:, sl], 0, 1))


def cgmm_objective(model: ConditionalGMM, poses, futures) -> tuple[float, np.ndarray]:
    """Mean log-likelihood of ``futures`` (N, S, 2) given ``poses`` (N, 5), and its gradient in the heads."""
    phi = model.features(poses)
    means, log_std, logw = model.parameters_for(poses)
    z = (futures[:, None] - means) * np.exp(-log_std)
    ll = -np.sum(0.5 * LOG_2PI + log_std + 0.5 * z**2, axis=(-2, -1))
    joint = logw + ll
    lse = logsumexp(joint, axis=1)
    n = futures.shape[0]
    resp = np.exp(joint - lse[:, None])  # (N, k)
    g_mean = resp[..., None, None] * z * np.exp(-log_std)
    g_ls = resp[..., None, None] * (z**2 - 1.0)
    g_logit = resp - np.exp(logw)
    grad = np.concatenate([
        np.einsum("nksd,nf->ksdf", g_mean, phi).ravel(),
        np.einsum("nksd,nf->ksdf", g_ls, phi).ravel(),
        (g_logit.T @ phi).ravel(),
    ]) / n
    return float(lse.mean()), grad


def _head_preconditioner(base: TrajectoryGMM) -> np.ndarray:
    """Inverse diagonal curvature of the objective at zero heads (standardised features).

    Mean heads scale with ``var / w``, log-std heads with ``1 / (2 w)`` and
    logit heads with ``1 / w``, where ``w`` is the component weight.
    """
    nf = len(POSE_FEATURES) + 1
    w = np.maximum(base.weights, 1e-3)
    p_mean = np.broadcast_to((base.variances / w[:, None, None])[..., None], base.means.shape + (nf,))
    p_ls = np.broadcast_to((0.5 / w)[:, None, None, None], base.means.shape + (nf,))
    p_logit = np.broadcast_to((1.0 / w)[:, None], (base.k, nf))
    return np.concatenate([p_mean.ravel(), p_ls.ravel(), p_logit.ravel()])


def cgmm_train(base: TrajectoryGMM, trajs, seed: int = 0, lr: float = 1e-3, iters: int = 2000) -> ConditionalGMM:
    """Fit the affine heads by full-batch gradient ascent with backtracking (base frozen).

    The heads condition on the pose at step ``base.start - 1``, the last step
    before the modelled window.  The step size grows by 10% after each
    accepted step and halves on rejection (including non-finite candidates),
    so the training objective never decreases.  Steps follow the gradient
    scaled by a fixed diagonal preconditioner (the inverse curvature at zero
    heads), which matters because mean-head gradients scale with the inverse
    component variance.  ``seed`` is accepted for
    interface symmetry; training is deterministic.
    """
    trajs = list(trajs)
    futures = _future_block(trajs, base.start)[:, : base.steps]
    poses = np.stack([pose_features(t.slice(0, base.start)) for t in trajs])
    mu, sd = poses.mean(axis=0), poses.std(axis=0)
    sd = np.where(sd > 1e-9, sd, 1.0)
    model = ConditionalGMM.zeros(base, mu, sd, base.start)
    precond = _head_preconditioner(base)
    theta = model.params()
    f, g = cgmm_objective(model, poses, futures)
    if not np.isfinite(f):
        raise FloatingPointError("base model gives a non-finite likelihood")
    trace = [f]
    step = lr
    for _ in range(iters):
        direction = precond * g
        slope = float(g @ direction)
        for _ in range(40):
            cand = model.with_params(theta + step * direction)
            f_new, g_new = cgmm_objective(cand, poses, futures)
            if np.isfinite(f_new) and f_new >= f + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            break
        theta, f, g, model = cand.params(), f_new, g_new, cand
        trace.append(f)
        step *= 1.1
    model.trace = trace
    log.info("cGMM: objective %.4f -> %.4f in %d steps", trace[0], trace[-1], len(trace) - 1)
    return model
