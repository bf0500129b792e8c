"""Context-conditioned forecasting with a fitted rSLDS."""
from __future__ import annotations

import numpy as np
from scipy.special import softmax

from ..trajectory import Trajectory
from .inference import RegimePosterior, discrete_posterior, laplace_batch
from .model import RSLDSModel, _categorical, _initial_regime_logits


def filter_context(model: RSLDSModel, context: Trajectory | np.ndarray, sweeps: int = 2):
    """Regime and state beliefs at the last context step.

    Runs the Laplace E-step on the context; the smoothed marginal at the
    final step equals the filtered one.  Returns ``(regime_probs, mean, cov)``.
    """
    y = context.states if isinstance(context, Trajectory) else np.asarray(context, dtype=float)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError("context must be a (T, D) array with T >= 1")
    T, k = y.shape[0], model.num_regimes
    if T == 1:
        gam = softmax(_initial_regime_logits(model, y[0]))[None]
        rp = RegimePosterior(gam, np.zeros((0, k, k)))
    else:
        # start from the evidence of the observed path before refining
        from .inference import observed_posterior

        rp = discrete_posterior(model, observed_posterior(y))
    cp = laplace_batch(model, y, rp, s_init=y)
    for _ in range(sweeps - 1):
        rp = discrete_posterior(model, cp)
        cp = laplace_batch(model, y, rp, s_init=cp.means)
    rp = discrete_posterior(model, cp)
    return rp.gammas[-1], cp.means[-1], cp.covs[-1]


def forecast(model: RSLDSModel, context: Trajectory | np.ndarray, horizon: int, num_samples: int = 300,
             seed: int = 0) -> np.ndarray:
    """Sample ``num_samples`` futures of length ``horizon`` after the context.

    Returns an array of shape ``(num_samples, horizon, D)``; row ``h`` is the
    state ``h + 1`` steps after the last context step.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    rng = np.random.default_rng(seed)
    probs, mean, cov = filter_context(model, context)
    dim, n = model.dim, num_samples
    z = _categorical(rng, np.broadcast_to(probs, (n, model.num_regimes)))
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    s = mean + (rng.standard_normal((n, dim)) * np.sqrt(np.maximum(w, 0.0))) @ v.T
    chol_q = np.linalg.cholesky(model.Q)
    out = np.empty((n, horizon, dim))
    for h in range(horizon):
        logits = model.transition_logits(s)[np.arange(n), z]
        z = _categorical(rng, softmax(logits, axis=-1))
        noise = np.einsum("nij,nj->ni", chol_q[z], rng.standard_normal((n, dim)))
        s = np.einsum("nij,nj->ni", model.A[z], s) + model.b[z] + noise
        out[:, h] = s
    return out
