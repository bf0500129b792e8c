"""Laplace variational EM for the rSLDS."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans

from ..gaussians import COV_FLOOR, clip_eigenvalues
from ..trajectory import DT, Trajectory
from .inference import (ContinuousPosterior, RegimePosterior, discrete_posterior, estep_elbo, laplace_batch,
                        observed_posterior)
from .model import VARIANTS, RSLDSModel, factored_softmax_terms

log = logging.getLogger(__name__)


@dataclass
class EMConfig:
    num_regimes: int = 10
    variant: str = "full"
    seed: int = 0
    max_iters: int = 50
    tol: float = 1e-7
    sweeps: int = 2
    transition_steps: int = 50
    transition_l2: float = 1e-3
    emission_var: float = 1e-6
    standardize: bool = False
    cov_floor: float = COV_FLOOR


@dataclass
class EMTrace:
    elbo: list[float] = field(default_factory=list)
    reseeded: list[int] = field(default_factory=list)
    converged: bool = False


@dataclass
class _Batch:
    y: np.ndarray  # (B, T, D)
    rp: RegimePosterior | None = None
    cp: ContinuousPosterior | None = None


def _batches(trajs) -> list[_Batch]:
    groups: dict[int, list[np.ndarray]] = defaultdict(list)
    for tr in trajs:
        states = tr.states if isinstance(tr, Trajectory) else np.asarray(tr, dtype=float)
        if states.shape[0] < 2:
            raise ValueError("training trajectories need at least two steps")
        groups[states.shape[0]].append(states)
    return [_Batch(np.stack(groups[T])) for T in sorted(groups)]


def _kmeans_init(batches: list[_Batch], k: int, seed: int) -> list[np.ndarray]:
    diffs = np.concatenate([np.diff(b.y, axis=1).reshape(-1, b.y.shape[-1]) for b in batches])
    scale = diffs.std(axis=0)
    scale[scale < 1e-12] = 1.0
    km = KMeans(n_clusters=k, n_init=4, random_state=seed).fit(diffs / scale)
    labels, start, out = km.labels_, 0, []
    for b in batches:
        n, T = b.y.shape[:2]
        lab = labels[start:start + n * (T - 1)].reshape(n, T - 1)
        start += n * (T - 1)
        lab = np.concatenate([lab[:, :1], lab], axis=1)
        out.append(np.eye(k)[lab])
    return out


def _hard_posterior(gammas: np.ndarray) -> RegimePosterior:
    xis = gammas[:, :-1, :, None] * gammas[:, 1:, None, :]
    return RegimePosterior(gammas, xis, np.zeros(gammas.shape[0]))


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------


def _dynamics_stats(batches: list[_Batch], k: int, dim: int):
    Sxx = np.zeros((k, dim + 1, dim + 1))
    Syx = np.zeros((k, dim, dim + 1))
    Syy = np.zeros((k, dim, dim))
    N = np.zeros(k)
    w0 = np.zeros(k)
    m0 = np.zeros((k, dim))
    s0 = np.zeros((k, dim, dim))
    for b in batches:
        m, S, X = b.cp.means, b.cp.covs, b.cp.cross
        g = b.rp.gammas[:, 1:]
        xp = np.concatenate([m[:, :-1], np.ones(m.shape[:1] + (m.shape[1] - 1, 1))], axis=-1)
        Exx = xp[..., :, None] * xp[..., None, :]
        Exx[..., :dim, :dim] += S[:, :-1]
        Eyx = m[:, 1:, :, None] * xp[..., None, :]
        Eyx[..., :dim] += np.swapaxes(X, -1, -2)
        Eyy = m[:, 1:, :, None] * m[:, 1:, None, :] + S[:, 1:]
        Sxx += np.einsum("ntk,ntij->kij", g, Exx)
        Syx += np.einsum("ntk,ntij->kij", g, Eyx)
        Syy += np.einsum("ntk,ntij->kij", g, Eyy)
        N += g.sum(axis=(0, 1))
        g0 = b.rp.gammas[:, 0]
        w0 += g0.sum(axis=0)
        m0 += g0.T @ m[:, 0]
        s0 += np.einsum("nk,nij->kij", g0, m[:, 0, :, None] * m[:, 0, None, :] + S[:, 0])
    return Sxx, Syx, Syy, N, w0, m0, s0


def _mstep_dynamics(model: RSLDSModel, stats, floor: float) -> None:
    Sxx, Syx, Syy, N, w0, m0, s0 = stats
    k, dim = model.num_regimes, model.dim
    for z in range(k):
        if N[z] < 1e-8:
            continue
        ridge = 1e-10 * np.trace(Sxx[z]) / (dim + 1) * np.eye(dim + 1)
        Ab = np.linalg.solve(Sxx[z] + ridge, Syx[z].T).T
        model.A[z], model.b[z] = Ab[:, :dim], Ab[:, dim]
        Q = (Syy[z] - Ab @ Syx[z].T - Syx[z] @ Ab.T + Ab @ Sxx[z] @ Ab.T) / N[z]
        model.Q[z] = clip_eigenvalues(Q, floor)
    total0 = w0.sum()
    model.pi0 = np.maximum(w0 / total0, 1e-12)
    model.pi0 /= model.pi0.sum()
    for z in range(k):
        if w0[z] < 1e-8:
            continue
        mu = m0[z] / w0[z]
        model.mu0[z] = mu
        model.Sigma0[z] = clip_eigenvalues(s0[z] / w0[z] - np.outer(mu, mu), floor)


def xi_stats(xis: np.ndarray):
    """Row sums (N, K), column sums (N, K) and the total over N (K, K) of pairwise marginals."""
    return xis.sum(axis=-1), xis.sum(axis=-2), xis.sum(axis=0)


def transition_objective(params, xis, s_prev, l2: float, variant: str = "full", stats=None):
    """Penalised expected log transition probability and its gradient.

    ``params`` is ``(R, W, r)``; ``xis`` (N, K, K) pairwise marginals and
    ``s_prev`` (N, D) the previous-state means, flattened over time and
    trajectories.  ``stats`` optionally caches :func:`xi_stats` of ``xis``.
    Returns ``(value, (dR, dW, dr))``.
    """
    R, W, r = params
    if variant == "recurrent-only":
        R = np.zeros_like(R)
    u = s_prev @ W.T + r
    eR, eu, Z, lse = factored_softmax_terms(R, u)
    stats = xi_stats(xis) if stats is None else stats
    # sum xi log P = sum xi (R + u) - sum_z rows_z lse_z
    value = float(np.sum(stats[2] * R) + np.sum(stats[1] * u) - np.sum(stats[0] * lse))
    value -= 0.5 * l2 * (np.sum(R**2) + np.sum(W**2) + np.sum(r**2))
    # expected counts under the model, sum_z rows_z P[z, k] and sum_n rows_z P[z, k]
    c = np.where(stats[0] > 0, stats[0] / np.where(Z > 0, Z, 1.0), 0.0)
    if np.any(Z <= 1e-250):
        P = np.exp(R[None] + u[:, None, :] - lse[..., None])
        wP = stats[0][..., None] * P
        by_next, by_prev = wP.sum(axis=1), wP.sum(axis=0)
    else:
        by_next = eu * (c @ eR)
        by_prev = eR * (c.T @ eu)
    gsum = stats[1] - by_next
    dR = stats[2] - by_prev - l2 * R
    if variant == "recurrent-only":
        dR = np.zeros_like(R)
    dW = gsum.T @ s_prev - l2 * W
    dr = gsum.sum(axis=0) - l2 * r
    return value, (dR, dW, dr)


def _mstep_transitions(model: RSLDSModel, batches: list[_Batch], steps: int, l2: float) -> float:
    if model.num_regimes == 1:
        return 0.0
    xis = np.concatenate([b.rp.xis.reshape(-1, model.num_regimes, model.num_regimes) for b in batches])
    s_prev = np.concatenate([b.cp.means[:, :-1].reshape(-1, model.dim) for b in batches])
    stats = xi_stats(xis)
    rows = stats[0]
    # diagonal curvature bounds act as a preconditioner for plain gradient ascent
    pre_R = 1.0 / (0.5 * rows.sum(axis=0)[:, None] + l2)
    pre_W = 1.0 / (0.5 * rows.sum() * np.ones((1, 1)) * np.mean(s_prev**2, axis=0)[None] + l2)
    pre_r = 1.0 / (0.5 * rows.sum() + l2)
    params = (model.R.copy(), model.W.copy(), model.r.copy())
    value, grad = transition_objective(params, xis, s_prev, l2, model.variant, stats)
    for _ in range(steps):
        direction = (pre_R * grad[0], pre_W * grad[1], pre_r * grad[2])
        slope = sum(float(np.sum(g * d)) for g, d in zip(grad, direction))
        if slope <= 1e-12 * max(1.0, abs(value)):
            break
        step = 1.0
        for _ in range(30):
            cand = tuple(p + step * d for p, d in zip(params, direction))
            cval, cgrad = transition_objective(cand, xis, s_prev, l2, model.variant, stats)
            if cval >= value + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            break
        params, value, grad = cand, cval, cgrad
    model.R, model.W, model.r = params
    if model.variant == "recurrent-only":
        model.R = np.zeros_like(model.R)
    return value


def _transition_prior(model: RSLDSModel, l2: float) -> float:
    return -0.5 * l2 * (np.sum(model.R**2) + np.sum(model.W**2) + np.sum(model.r**2))


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


def _estep(model: RSLDSModel, batch: _Batch, sweeps: int) -> np.ndarray:
    for _ in range(sweeps):
        batch.rp = discrete_posterior(model, batch.cp)
        batch.cp = laplace_batch(model, batch.y, batch.rp, s_init=batch.cp.means)
    batch.rp = discrete_posterior(model, batch.cp)
    return estep_elbo(model, batch.y, batch.rp, batch.cp)


def _reseed_regime(model: RSLDSModel, z: int, batches: list[_Batch], floor: float) -> None:
    """Refit regime ``z`` by least squares on the worst-explained stretch of data."""
    worst = None
    for bi, b in enumerate(batches):
        m = b.cp.means
        pred = np.einsum("zij,ntj->ntzi", model.A, m[:, :-1]) + model.b
        err = np.min(np.sum((m[:, 1:, None, :] - pred) ** 2, axis=-1), axis=-1)
        n, t = np.unravel_index(np.argmax(err), err.shape)
        if worst is None or err[n, t] > worst[0]:
            worst = (err[n, t], bi, n, t)
    _, bi, n, t = worst
    m = batches[bi].cp.means[n]
    lo, hi = max(0, t - 10), min(m.shape[0] - 1, t + 10)
    x = np.concatenate([m[lo:hi], np.ones((hi - lo, 1))], axis=1)
    y = m[lo + 1:hi + 1]
    Ab = np.linalg.lstsq(x, y, rcond=None)[0].T
    model.A[z], model.b[z] = Ab[:, :model.dim], Ab[:, model.dim]
    resid = y - x @ Ab.T
    model.Q[z] = clip_eigenvalues(np.cov(resid.T, bias=True) + floor * np.eye(model.dim), floor)
    model.R[:, z] = 0.0
    model.W[z] = 0.0
    model.r[z] = np.mean(model.r)


def _init_model(batches: list[_Batch], cfg: EMConfig) -> RSLDSModel:
    k = cfg.num_regimes
    dim = batches[0].y.shape[-1]
    if k > 1:
        hard = _kmeans_init(batches, k, cfg.seed)
    else:
        hard = [np.ones(b.y.shape[:2] + (1,)) for b in batches]
    model = RSLDSModel(
        A=np.repeat(np.eye(dim)[None], k, 0), b=np.zeros((k, dim)), Q=np.repeat(np.eye(dim)[None], k, 0),
        R=np.zeros((k, k)), W=np.zeros((k, dim)), r=np.zeros(k), pi0=np.full(k, 1.0 / k),
        mu0=np.zeros((k, dim)), Sigma0=np.repeat(np.eye(dim)[None], k, 0),
        S=cfg.emission_var * np.eye(dim), variant=cfg.variant,
    )
    for b, g in zip(batches, hard):
        b.rp = _hard_posterior(g)
        b.cp = observed_posterior(b.y)
    _mstep_dynamics(model, _dynamics_stats(batches, k, dim), cfg.cov_floor)
    if k > 1 and cfg.variant == "full":
        counts = sum(b.rp.xis.sum(axis=(0, 1)) for b in batches) + 1.0
        model.R = np.log(counts / counts.sum(axis=1, keepdims=True))
    for b in batches:
        b.cp = laplace_batch(model, b.y, b.rp, s_init=b.y)
    return model


def _standardizer(batches):
    allx = np.concatenate([b.y.reshape(-1, b.y.shape[-1]) for b in batches])
    mean = allx.mean(axis=0)
    sd = allx.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return mean, sd


def _unstandardize(model: RSLDSModel, mean: np.ndarray, sd: np.ndarray) -> RSLDSModel:
    D = np.diag(sd)
    Di = np.diag(1.0 / sd)
    A = D @ model.A @ Di
    b = np.einsum("ij,kj->ki", D, model.b) + mean - np.einsum("kij,j->ki", A, mean)
    Q = D @ model.Q @ D
    W = model.W @ Di
    r = model.r - W @ mean
    mu0 = model.mu0 * sd + mean
    Sigma0 = D @ model.Sigma0 @ D
    S = D @ model.S @ D
    return model.copy(A=A, b=b, Q=Q, W=W, r=r, mu0=mu0, Sigma0=Sigma0, S=S)


def fit_variational_em(trajs, num_regimes: int = 10, variant: str = "full", seed: int = 0,
                       max_iters: int = 50, **options) -> tuple[RSLDSModel, EMTrace]:
    """Fit an rSLDS to fully observed trajectories with Laplace variational EM.

    Each iteration runs ``sweeps`` alternations of the discrete (forward-backward)
    and continuous (Laplace) updates, then closed-form weighted least squares
    for the dynamics and preconditioned gradient ascent with backtracking for
    the transition parameters.  The ELBO after every E-step is recorded.

    Extra keyword options are fields of :class:`EMConfig`.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    cfg = EMConfig(num_regimes=num_regimes, variant=variant, seed=seed, max_iters=max_iters, **options)
    trajs = list(trajs)
    if not trajs:
        raise ValueError("need at least one trajectory")
    batches = _batches(trajs)
    if cfg.standardize:
        mean, sd = _standardizer(batches)
        for b in batches:
            b.y = (b.y - mean) / sd
    model = _init_model(batches, cfg)

    trace = EMTrace()
    for it in range(cfg.max_iters):
        elbo = sum(float(np.sum(_estep(model, b, cfg.sweeps))) for b in batches)
        elbo += _transition_prior(model, cfg.transition_l2)
        trace.elbo.append(elbo)
        log.debug("EM iteration %d: ELBO %.6f", it, elbo)
        if len(trace.elbo) > 1 and (it - 1) not in trace.reseeded:
            prev = trace.elbo[-2]
            if abs(elbo - prev) <= cfg.tol * abs(prev):
                trace.converged = True
                break
        _mstep_dynamics(model, _dynamics_stats(batches, model.num_regimes, model.dim), cfg.cov_floor)
        _mstep_transitions(model, batches, cfg.transition_steps, cfg.transition_l2)
        usage = sum(b.rp.gammas.sum(axis=(0, 1)) for b in batches)
        empty = np.flatnonzero(usage < 1e-8)
        for z in empty:
            _reseed_regime(model, int(z), batches, cfg.cov_floor)
        if empty.size:
            trace.reseeded.append(it)
    if cfg.standardize:
        model = _unstandardize(model, mean, sd)
    model.meta.update(seed=seed, iterations=len(trace.elbo), standardized=cfg.standardize)
    return model, trace
