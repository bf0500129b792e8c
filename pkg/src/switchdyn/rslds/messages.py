"""Message passing: log-space forward-backward and block-tridiagonal Gaussian solves.

All routines accept arbitrary leading batch axes so that many equal-length
trajectories can be processed together.
"""
from __future__ import annotations

import numpy as np


def logsumexp(x: np.ndarray, axis=-1, keepdims: bool = False) -> np.ndarray:
    """Stable log-sum-exp that tolerates all ``-inf`` slices; lighter than the scipy version."""
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def forward_backward(log_pi0, log_trans, log_lik):
    """Posterior marginals of a chain with time-varying transitions.

    Parameters
    ----------
    log_pi0 : (..., K) initial log potentials.
    log_trans : (..., T-1, K, K) log transition potentials ``[t, z_prev, z_next]``.
    log_lik : (..., T, K) per-step log evidence.

    Returns
    -------
    gammas : (..., T, K) smoothed marginals.
    xis : (..., T-1, K, K) pairwise marginals.
    log_z : (...) log normalizer of the chain.
    """
    log_pi0 = np.asarray(log_pi0, dtype=float)
    log_trans = np.asarray(log_trans, dtype=float)
    log_lik = np.asarray(log_lik, dtype=float)
    T = log_lik.shape[-2]
    alphas = np.empty_like(log_lik)
    alphas[..., 0, :] = log_pi0 + log_lik[..., 0, :]
    for t in range(1, T):
        alphas[..., t, :] = logsumexp(alphas[..., t - 1, :, None] + log_trans[..., t - 1, :, :], axis=-2) \
            + log_lik[..., t, :]
    log_z = logsumexp(alphas[..., T - 1, :], axis=-1)

    betas = np.zeros_like(log_lik)
    for t in range(T - 2, -1, -1):
        betas[..., t, :] = logsumexp(log_trans[..., t, :, :] + (log_lik[..., t + 1, :] + betas[..., t + 1, :])[..., None, :],
                                     axis=-1)
    log_gamma = alphas + betas
    gammas = np.exp(log_gamma - logsumexp(log_gamma, axis=-1, keepdims=True))
    if T > 1:
        log_xi = (alphas[..., :-1, :, None] + log_trans
                  + (log_lik[..., 1:, :] + betas[..., 1:, :])[..., None, :])
        xis = np.exp(log_xi - logsumexp(log_xi, axis=(-2, -1), keepdims=True))
    else:
        xis = np.zeros(log_lik.shape[:-2] + (0,) + log_lik.shape[-1:] * 2)
    return gammas, xis, log_z


def forward_filter(log_pi0, log_trans, log_lik):
    """Filtered marginals ``p(z_t | data_{0:t})`` and the log normalizer."""
    log_lik = np.asarray(log_lik, dtype=float)
    T = log_lik.shape[-2]
    alphas = np.empty_like(log_lik)
    alphas[..., 0, :] = log_pi0 + log_lik[..., 0, :]
    for t in range(1, T):
        alphas[..., t, :] = logsumexp(alphas[..., t - 1, :, None] + log_trans[..., t - 1, :, :], axis=-2) \
            + log_lik[..., t, :]
    log_norm = logsumexp(alphas, axis=-1, keepdims=True)
    return np.exp(alphas - log_norm), log_norm[..., -1, 0]


def block_tridiag_solve(J_diag, J_lower, h):
    """Solve ``J x = h`` for a block-tridiagonal SPD precision.

    Parameters
    ----------
    J_diag : (..., T, D, D) diagonal blocks.
    J_lower : (..., T-1, D, D) sub-diagonal blocks, ``J_lower[t] = J[t+1, t]``.
    h : (..., T, D) right-hand side.

    Returns
    -------
    x : (..., T, D) solution (the Gaussian mean).
    sigma : (..., T, D, D) diagonal blocks of ``J^{-1}``.
    cross : (..., T-1, D, D) blocks ``J^{-1}[t, t+1]``, i.e. ``Cov(x_t, x_{t+1})``.
    logdet : (...) log-determinant of ``J``.
    """
    J_diag = np.asarray(J_diag, dtype=float)
    J_lower = np.asarray(J_lower, dtype=float)
    h = np.asarray(h, dtype=float)
    T, D = J_diag.shape[-3], J_diag.shape[-1]
    eye = np.eye(D)
    p_inv = np.empty_like(J_diag)
    h_tilde = np.empty_like(h)
    logdet = np.zeros(J_diag.shape[:-3])

    P = J_diag[..., 0, :, :]
    ht = h[..., 0, :]
    for t in range(T):
        if t > 0:
            L = J_lower[..., t - 1, :, :]
            Lp = L @ p_inv[..., t - 1, :, :]
            P = J_diag[..., t, :, :] - Lp @ np.swapaxes(L, -1, -2)
            ht = h[..., t, :] - np.einsum("...ij,...j->...i", Lp, h_tilde[..., t - 1, :])
        P = 0.5 * (P + np.swapaxes(P, -1, -2))
        chol = np.linalg.cholesky(P)
        logdet = logdet + 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
        chol_inv = np.linalg.solve(chol, np.broadcast_to(eye, chol.shape))
        p_inv[..., t, :, :] = np.swapaxes(chol_inv, -1, -2) @ chol_inv
        h_tilde[..., t, :] = ht

    x = np.empty_like(h)
    sigma = np.empty_like(J_diag)
    cross = np.empty(J_lower.shape)
    x[..., T - 1, :] = np.einsum("...ij,...j->...i", p_inv[..., T - 1, :, :], h_tilde[..., T - 1, :])
    sigma[..., T - 1, :, :] = p_inv[..., T - 1, :, :]
    for t in range(T - 2, -1, -1):
        Pi = p_inv[..., t, :, :]
        Lt = np.swapaxes(J_lower[..., t, :, :], -1, -2)  # J[t, t+1]
        G = -Pi @ Lt
        x[..., t, :] = np.einsum("...ij,...j->...i", Pi, h_tilde[..., t, :]) \
            + np.einsum("...ij,...j->...i", G, x[..., t + 1, :])
        cross[..., t, :, :] = G @ sigma[..., t + 1, :, :]
        s = Pi + cross[..., t, :, :] @ np.swapaxes(G, -1, -2)
        sigma[..., t, :, :] = 0.5 * (s + np.swapaxes(s, -1, -2))
    return x, sigma, cross, logdet


def block_tridiag_matvec(J_diag, J_lower, x):
    """Product ``J x`` for a symmetric block-tridiagonal ``J``."""
    out = np.einsum("...tij,...tj->...ti", J_diag, x)
    out[..., 1:, :] += np.einsum("...tij,...tj->...ti", J_lower, x[..., :-1, :])
    out[..., :-1, :] += np.einsum("...tji,...tj->...ti", J_lower, x[..., 1:, :])
    return out
