"""Laplace-EM E-step pieces: discrete forward-backward and continuous Laplace mode finding."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..gaussians import LOG_2PI
from ..trajectory import Trajectory
from .messages import block_tridiag_matvec, block_tridiag_solve, forward_backward
from .model import RSLDSModel, factored_softmax_terms, log_softmax


@dataclass
class RegimePosterior:
    """Smoothed regime marginals ``gammas`` (T, K) and pairwise marginals ``xis`` (T-1, K, K).

    Arrays may carry a leading batch axis when produced by the batched E-step.
    """

    gammas: np.ndarray
    xis: np.ndarray
    log_normalizer: np.ndarray | float = 0.0

    def __getitem__(self, i) -> "RegimePosterior":
        ln = self.log_normalizer
        return RegimePosterior(self.gammas[i], self.xis[i], ln[i] if np.ndim(ln) else ln)


@dataclass
class ContinuousPosterior:
    """Gaussian posterior over a continuous path from the Laplace approximation.

    ``covs`` are the diagonal blocks of the inverse negative Hessian at the
    mode and ``cross[t]`` is ``Cov(s_t, s_{t+1})``.
    """

    means: np.ndarray
    covs: np.ndarray
    cross: np.ndarray
    logdet_precision: np.ndarray | float
    converged: np.ndarray | bool = True
    grad_norm: np.ndarray | float = 0.0
    iterations: int = 0

    def __getitem__(self, i) -> "ContinuousPosterior":
        def pick(v):
            return v[i] if np.ndim(v) else v
        return ContinuousPosterior(self.means[i], self.covs[i], self.cross[i], pick(self.logdet_precision),
                                   pick(self.converged), pick(self.grad_norm), self.iterations)

    @property
    def entropy(self):
        T, D = self.means.shape[-2:]
        return 0.5 * T * D * (1.0 + LOG_2PI) - 0.5 * np.asarray(self.logdet_precision)


def observed_posterior(y: np.ndarray) -> ContinuousPosterior:
    """Degenerate posterior that puts all mass on the observed path."""
    y = np.asarray(y, dtype=float)
    T, D = y.shape[-2:]
    zeros = np.zeros(y.shape[:-2] + (T, D, D))
    return ContinuousPosterior(y.copy(), zeros, zeros[..., :-1, :, :].copy(), np.zeros(y.shape[:-2]))


# ---------------------------------------------------------------------------
# discrete step
# ---------------------------------------------------------------------------


def _initial_expected_loglik(model: RSLDSModel, m0, S0):
    # E log N(s_0; mu0_k, Sigma0_k) under N(m0, S0); returns (..., K)
    inv = np.linalg.inv(model.Sigma0)
    _, logdet = np.linalg.slogdet(model.Sigma0)
    e = m0[..., None, :] - model.mu0
    quad = np.einsum("...ki,kij,...kj->...k", e, inv, e)
    tr = np.einsum("kij,...ji->...k", inv, S0)
    return -0.5 * (model.dim * LOG_2PI + logdet + quad + tr)


def expected_dynamics_loglik(model: RSLDSModel, cp: ContinuousPosterior) -> np.ndarray:
    """``E_q[log N(s_t; A_k s_{t-1} + b_k, Q_k)]`` for t >= 1, shape (..., T-1, K)."""
    m, S, X = cp.means, cp.covs, cp.cross
    Qi = np.linalg.inv(model.Q)
    _, logdetQ = np.linalg.slogdet(model.Q)
    QiA = Qi @ model.A
    AtQiA = np.swapaxes(model.A, -1, -2) @ QiA
    pred = np.einsum("kij,...tj->...tki", model.A, m[..., :-1, :]) + model.b
    e = m[..., 1:, None, :] - pred
    quad = np.einsum("...tki,kij,...tkj->...tk", e, Qi, e)
    tr = (np.einsum("kij,...tji->...tk", Qi, S[..., 1:, :, :])
          + np.einsum("kij,...tji->...tk", AtQiA, S[..., :-1, :, :])
          - 2.0 * np.einsum("kij,...tji->...tk", QiA, X))
    return -0.5 * (model.dim * LOG_2PI + logdetQ + quad + tr)


def chain_potentials(model: RSLDSModel, cp: ContinuousPosterior):
    """Log potentials (initial, transition, evidence) of the regime chain given ``q(s)``.

    Transition potentials are evaluated at the posterior mean of the previous state.
    """
    m = cp.means
    with np.errstate(divide="ignore"):
        log_pi0 = np.log(model.pi0) + _initial_expected_loglik(model, m[..., 0, :], cp.covs[..., 0, :, :])
    log_trans = log_softmax(model.transition_logits(m[..., :-1, :]), axis=-1)
    dyn = expected_dynamics_loglik(model, cp)
    log_lik = np.concatenate([np.zeros(dyn.shape[:-2] + (1, model.num_regimes)), dyn], axis=-2)
    return log_pi0, log_trans, log_lik


def discrete_posterior(model: RSLDSModel, expected_states: ContinuousPosterior) -> RegimePosterior:
    """Forward-backward over expected log-densities of the continuous path."""
    gammas, xis, log_z = forward_backward(*chain_potentials(model, expected_states))
    return RegimePosterior(gammas, xis, log_z)


# ---------------------------------------------------------------------------
# continuous step
# ---------------------------------------------------------------------------


def quadratic_terms(model: RSLDSModel, y: np.ndarray, gammas: np.ndarray):
    """Block-tridiagonal precision and linear term of the regime-averaged Gaussian factors."""
    B = y.shape[:-2]
    T, D = y.shape[-2], model.dim
    Qi = np.linalg.inv(model.Q)
    QiA = Qi @ model.A
    AtQiA = np.swapaxes(model.A, -1, -2) @ QiA
    Qib = np.einsum("kij,kj->ki", Qi, model.b)
    AtQib = np.einsum("kji,kj->ki", model.A, Qib)
    S0i = np.linalg.inv(model.Sigma0)
    S0imu = np.einsum("kij,kj->ki", S0i, model.mu0)
    Si = np.linalg.inv(model.S)
    CtSi = model.C.T @ Si

    J_diag = np.zeros(B + (T, D, D))
    h = np.zeros(B + (T, D))
    g0 = gammas[..., 0, :]
    J_diag[..., 0, :, :] += np.einsum("...k,kij->...ij", g0, S0i)
    h[..., 0, :] += g0 @ S0imu
    g = gammas[..., 1:, :]
    J_diag[..., 1:, :, :] += np.einsum("...tk,kij->...tij", g, Qi)
    J_diag[..., :-1, :, :] += np.einsum("...tk,kij->...tij", g, AtQiA)
    J_lower = -np.einsum("...tk,kij->...tij", g, QiA)
    h[..., 1:, :] += g @ Qib
    h[..., :-1, :] -= g @ AtQib
    J_diag += CtSi @ model.C
    h += (y - model.d) @ CtSi.T
    return J_diag, J_lower, h


def transition_terms(model: RSLDSModel, s: np.ndarray, xis: np.ndarray):
    """Value, gradient and negated Hessian of ``sum xi log P(z'|z, s_prev)`` in the path ``s``."""
    T = s.shape[-2]
    value = np.zeros(s.shape[:-2])
    grad = np.zeros_like(s)
    hess_neg = np.zeros(s.shape + (s.shape[-1],))
    if T < 2 or model.num_regimes == 1:
        return value, grad, hess_neg
    u = s[..., :-1, :] @ model.W.T + model.r
    eR, eu, Z, lse = factored_softmax_terms(model.R, u)
    rows = xis.sum(axis=-1)
    cols = xis.sum(axis=-2)
    value = (np.sum(xis * model.R, axis=(-3, -2, -1)) + np.sum(cols * u, axis=(-2, -1))
             - np.sum(rows * lse, axis=(-2, -1)))
    P = np.exp(model.R + u[..., None, :] - lse[..., None])
    rP = rows[..., None] * P
    pbar = rP.sum(axis=-2)
    grad[..., :-1, :] = (cols - pbar) @ model.W
    # W^T (diag(pbar) - sum_z rows_z p_z p_z^T) W
    PW = P @ model.W
    hess_neg[..., :-1, :, :] = (model.W.T * pbar[..., None, :]) @ model.W - np.swapaxes(rP @ model.W, -1, -2) @ PW
    return value, grad, hess_neg


def _objective(J_diag, J_lower, h, model, s, xis):
    quad = -0.5 * np.sum(s * block_tridiag_matvec(J_diag, J_lower, s), axis=(-2, -1)) + np.sum(h * s, axis=(-2, -1))
    return quad + transition_terms(model, s, xis)[0]


def laplace_batch(model: RSLDSModel, y: np.ndarray, regimes: RegimePosterior, s_init=None,
                  max_iters: int = 50, xtol: float = 1e-10) -> ContinuousPosterior:
    """Newton ascent on the regime-averaged joint log-density of the path (batched)."""
    y = np.asarray(y, dtype=float)
    J_diag, J_lower, h = quadratic_terms(model, y, regimes.gammas)
    xis = regimes.xis
    if s_init is None:
        s = np.linalg.lstsq(model.C, np.moveaxis(y - model.d, -1, 0).reshape(model.C.shape[0], -1),
                            rcond=None)[0].T.reshape(y.shape[:-1] + (model.dim,))
    else:
        s = np.array(s_init, dtype=float)
    batch = s.shape[:-2]
    converged = np.zeros(batch, dtype=bool)
    obj = _objective(J_diag, J_lower, h, model, s, xis)
    it = 0
    for it in range(1, max_iters + 1):
        _, g_tr, H_tr = transition_terms(model, s, xis)
        grad = h - block_tridiag_matvec(J_diag, J_lower, s) + g_tr
        delta = block_tridiag_solve(J_diag + H_tr, J_lower, grad)[0]
        step = np.ones(batch)
        new_s = s + delta
        new_obj = _objective(J_diag, J_lower, h, model, new_s, xis)
        slack = 1e-12 * (1.0 + np.abs(obj))
        for _ in range(40):
            bad = ~(new_obj >= obj - slack) & ~converged
            if not np.any(bad):
                break
            step = np.where(bad, 0.5 * step, step)
            new_s = s + step[..., None, None] * delta
            new_obj = _objective(J_diag, J_lower, h, model, new_s, xis)
        small = np.max(np.abs(step[..., None, None] * delta), axis=(-2, -1)) <= xtol * (1.0 + np.max(np.abs(s), axis=(-2, -1)))
        accept = (~converged)[..., None, None]
        s = np.where(accept, new_s, s)
        obj = np.where(~converged, np.maximum(new_obj, obj), obj)
        converged = converged | small
        if np.all(converged):
            break
    if not np.all(converged):
        warnings.warn("Laplace mode search hit max_iters; returning best iterate", RuntimeWarning, stacklevel=2)
    _, g_tr, H_tr = transition_terms(model, s, xis)
    grad = h - block_tridiag_matvec(J_diag, J_lower, s) + g_tr
    _, sigma, cross, logdet = block_tridiag_solve(J_diag + H_tr, J_lower, np.zeros_like(s))
    return ContinuousPosterior(s, sigma, cross, logdet, converged,
                               np.sqrt(np.sum(grad**2, axis=(-2, -1))), it)


def continuous_laplace(model: RSLDSModel, traj: Trajectory | np.ndarray, regimes: RegimePosterior,
                       s_init=None, max_iters: int = 50) -> ContinuousPosterior:
    """Laplace approximation to ``q(s_{0:T-1})`` given regime marginals.

    When the regime-averaged joint is Gaussian (one regime, or transitions
    independent of the state) a single Newton step lands on the exact mode
    and the returned moments coincide with Kalman smoothing.
    """
    y = traj.states if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    return laplace_batch(model, y, regimes, s_init=s_init, max_iters=max_iters)


def expected_emission_loglik(model: RSLDSModel, y: np.ndarray, cp: ContinuousPosterior):
    Si = np.linalg.inv(model.S)
    _, logdetS = np.linalg.slogdet(model.S)
    e = y - cp.means @ model.C.T - model.d
    quad = np.einsum("...ti,ij,...tj->...t", e, Si, e)
    tr = np.einsum("ij,...tji->...t", model.C.T @ Si @ model.C, cp.covs)
    return np.sum(-0.5 * (y.shape[-1] * LOG_2PI + logdetS + quad + tr), axis=-1)


def estep_elbo(model: RSLDSModel, y: np.ndarray, rp: RegimePosterior, cp: ContinuousPosterior):
    """Per-trajectory ELBO when ``rp`` is the optimal regime posterior for ``cp``."""
    return np.asarray(rp.log_normalizer) + expected_emission_loglik(model, y, cp) + cp.entropy
