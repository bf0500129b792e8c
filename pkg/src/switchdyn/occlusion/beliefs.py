"""Position beliefs for pedestrian slots.

Gaussian-family beliefs are represented as a Gaussian ``G`` multiplied by a
piecewise-constant weight: 1 on a support region ``K`` (where the pedestrian
may still be hiding) and ``exp(log_leak)`` elsewhere.  Within one update the
posterior is the exact tilt of this prior by the detection densities and the
flag likelihood, so every position update is an exact coordinate-ascent step.
The prediction step collapses the tilted density back to the
Gaussian-times-support form.

:class:`GridBelief` is a categorical belief over fixed points with exact
updates, used on small enumerable problems.

Both kinds answer the expectations the tracker needs for the local objective

    F(q) = -KL(q || prior) + sum_l w_l E_q[log N(o_l; s, var I)]
           + alpha_v + (alpha_r - alpha_v) q(H)

with ``alpha_r`` / ``alpha_v`` the flag log-factors inside / outside the
hidden region ``H``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from ..gaussians import LOG_2PI
from .regions import HiddenRegion, gaussian_region_moments

DEFAULT_LEAK = 0.01


def _obs_arrays(obs, weights):
    # copies: callers pass views of association matrices that are updated in place
    obs = np.array(obs, dtype=float).reshape(-1, 2)
    weights = np.array(weights, dtype=float).reshape(-1)
    return obs, weights


def _expected_obs_loglik(mean, cov, obs, var):
    obs = np.asarray(obs, dtype=float).reshape(-1, 2)
    d2 = np.sum((obs - mean) ** 2, axis=1)
    return -LOG_2PI - np.log(var) - 0.5 * (d2 + np.trace(cov)) / var


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    def region_moments(self, region: HiddenRegion | None):
        if region is None:
            return 1.0, self.mean.copy(), self.cov + np.outer(self.mean, self.mean)
        if region.is_empty:
            return 0.0, np.zeros(2), np.zeros((2, 2))
        return gaussian_region_moments(self.mean, self.cov, region.pieces)

    def product(self, obs, weights, var):
        """Normalised product with ``prod_l N(o_l; s, var I)^{w_l}`` and its log normaliser."""
        obs, weights = _obs_arrays(obs, weights)
        W = float(weights.sum())
        if W == 0.0:
            return self, 0.0
        Pi = np.linalg.inv(self.cov)
        prec = Pi + (W / var) * np.eye(2)
        cov = np.linalg.inv(prec)
        eta = Pi @ self.mean + (weights @ obs) / var
        mean = cov @ eta
        log_norm = (-W * (LOG_2PI + np.log(var)) - float(weights @ np.sum(obs**2, axis=1)) / (2 * var)
                    - 0.5 * self.mean @ Pi @ self.mean + 0.5 * eta @ mean
                    - 0.5 * (np.linalg.slogdet(self.cov)[1] + np.linalg.slogdet(prec)[1]))
        return GaussianBelief(mean, cov), float(log_norm)

    def to_dict(self) -> dict:
        return {"type": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist()}


@dataclass(frozen=True)
class SupportGaussian:
    """Density proportional to ``G(s) * (1_K(s) + exp(log_leak) 1_{not K}(s))``.

    ``support=None`` means no restriction (a plain Gaussian).
    """

    base: GaussianBelief
    support: HiddenRegion | None = None
    log_leak: float = 0.0

    @classmethod
    def gaussian(cls, mean, cov) -> "SupportGaussian":
        return cls(GaussianBelief(mean, cov))

    def tilt(self, obs, weights, var, alpha_v, alpha_r, region: HiddenRegion) -> "TiltedGaussian":
        return TiltedGaussian(self, *_obs_arrays(obs, weights), float(var), float(alpha_v), float(alpha_r), region)

    def predict(self, var_proc: float) -> "SupportGaussian":
        b = GaussianBelief(self.base.mean, self.base.cov + var_proc * np.eye(2))
        return SupportGaussian(b, self.support, self.log_leak)

    @cached_property
    def log_mass(self) -> float:
        """``log int G(s) k(s) ds`` for the support weighting ``k``."""
        if self.support is None:
            return 0.0
        pk = self.base.region_moments(self.support)[0]
        return float(np.log(pk + np.exp(self.log_leak) * max(1.0 - pk, 0.0)))

    @property
    def mean(self):
        return self.tilt(np.zeros((0, 2)), np.zeros(0), 1.0, 0.0, 0.0, HiddenRegion.empty()).mean

    @property
    def cov(self):
        return self.tilt(np.zeros((0, 2)), np.zeros(0), 1.0, 0.0, 0.0, HiddenRegion.empty()).cov

    def std(self) -> float:
        return float(np.sqrt(np.trace(self.cov) / 2))

    def to_dict(self) -> dict:
        return {"type": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist()}


class TiltedGaussian:
    """Exact posterior ``prior(s) * prod N(o_l; s)^{w_l} * exp(alpha(s)) / Z``.

    ``alpha`` equals ``alpha_r`` on ``region`` and ``alpha_v`` elsewhere.  All
    expectations are computed from Gaussian integrals over four cells formed
    by the prior support and ``region``.
    """

    def __init__(self, prior: SupportGaussian, obs, weights, var, alpha_v, alpha_r, region: HiddenRegion):
        self.prior = prior
        self.obs, self.weights = obs, weights
        self.var, self.alpha_v, self.alpha_r = var, alpha_v, alpha_r
        self.region = region
        self.gauss, self.log_gauss_norm = prior.base.product(obs, weights, var)
        g = self.gauss
        tot = g.region_moments(None)
        rH = g.region_moments(region)
        if prior.support is None:
            cells = [(rH, alpha_r), (tuple(np.subtract(t, h) for t, h in zip(tot, rH)), alpha_v)]
        else:
            K = prior.support
            rK = g.region_moments(K)
            rKH = g.region_moments(K.intersect(region))
            lk = prior.log_leak
            a = rKH
            b = tuple(np.subtract(k, x) for k, x in zip(rK, rKH))
            c = tuple(np.subtract(h, x) for h, x in zip(rH, rKH))
            d = tuple(t - k - h + x for t, k, h, x in zip(tot, rK, rH, rKH))
            cells = [(a, alpha_r), (b, alpha_v), (c, lk + alpha_r), (d, lk + alpha_v)]
        logw = np.array([lw for _, lw in cells])
        mass = np.array([max(float(st[0]), 0.0) for st, _ in cells])
        top = logw.max()
        scaled = np.exp(logw - top) * mass
        total = scaled.sum()
        if not total > 0:
            raise FloatingPointError("tilted density has no mass")
        self._cells = cells
        self._cell_probs = scaled / total
        self.log_z = float(top + np.log(total) + self.log_gauss_norm)
        first = sum(np.exp(lw - top) * np.asarray(st[1]) for st, lw in cells) / total
        second = sum(np.exp(lw - top) * np.asarray(st[2]) for st, lw in cells) / total
        self.mean = first
        cov = second - np.outer(first, first)
        cov = 0.5 * (cov + cov.T)
        w, v = np.linalg.eigh(cov)
        self.cov = (v * np.maximum(w, 1e-14)) @ v.T
        in_region = [0] if prior.support is None else [0, 2]
        self._hidden = float(np.clip(sum(self._cell_probs[i] for i in in_region), 0.0, 1.0))

    # -- tracker interface ----------------------------------------------------

    def hidden_mass(self, region: HiddenRegion) -> float:
        if region is not self.region and region != self.region:
            raise ValueError("hidden mass is only available for the region of the tilt")
        return self._hidden

    def expected_obs_loglik(self, obs, var: float) -> np.ndarray:
        return _expected_obs_loglik(self.mean, self.cov, obs, var)

    def marginal_obs_loglik(self, obs, var: float) -> np.ndarray:
        """Log of ``E_q[N(o; s, var I)]`` under the moment-matched Gaussian of ``q``."""
        obs = np.asarray(obs, dtype=float).reshape(-1, 2)
        S = self.cov + var * np.eye(2)
        e = obs - self.mean
        return -LOG_2PI - 0.5 * np.linalg.slogdet(S)[1] - 0.5 * np.einsum("li,ij,lj->l", e, np.linalg.inv(S), e)

    def expected_log_tilt(self) -> float:
        val = self.alpha_v + (self.alpha_r - self.alpha_v) * self._hidden
        if self.weights.size:
            val += float(self.weights @ self.expected_obs_loglik(self.obs, self.var))
        return val

    def kl(self, prior=None) -> float:
        return max(self.expected_log_tilt() - self.log_z + self.prior.log_mass, 0.0)

    def local_objective(self, prior, obs, weights, var, alpha_v, alpha_r, region) -> float:
        obs, weights = _obs_arrays(obs, weights)
        val = -self.kl() + alpha_v + (alpha_r - alpha_v) * self.hidden_mass(region)
        if weights.size:
            val += float(weights @ self.expected_obs_loglik(obs, var))
        return val

    def update(self, prior, obs, weights, var, alpha_v, alpha_r, region, max_iters: int = 0):
        q = self.prior.tilt(obs, weights, var, alpha_v, alpha_r, region)
        return q, q.log_z - self.prior.log_mass

    def std(self) -> float:
        return float(np.sqrt(np.trace(self.cov) / 2))

    def predict(self, var_proc: float, leak: float = DEFAULT_LEAK) -> SupportGaussian:
        """Collapse to a Gaussian-times-support prior for the next step.

        The Gaussian part keeps the detection evidence; the support becomes
        the part of the old support that stayed hidden, provided the belief
        mostly lives there.  The relative weight outside the support keeps the
        posterior's inside/outside split but never drops below ``leak``.
        """
        K = self.region if self.prior.support is None else self.prior.support.intersect(self.region)
        p_in = float(self._hidden)
        base = GaussianBelief(self.gauss.mean, self.gauss.cov + var_proc * np.eye(2))
        if K.is_empty or p_in < 0.5:
            return SupportGaussian(base)
        g_in = self.gauss.region_moments(K)[0]
        if g_in <= 1e-300 or g_in >= 1.0:
            return SupportGaussian(base, K, 0.0) if g_in > 0 else SupportGaussian(base)
        ratio = (1.0 - p_in) / max(p_in, 1e-300) * g_in / (1.0 - g_in)
        floor = np.log(leak) if leak > 0 else -np.inf
        log_leak = float(np.clip(np.log(max(ratio, 1e-300)), floor, 0.0))
        return SupportGaussian(base, K, log_leak)

    def to_dict(self) -> dict:
        return {"type": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist()}


@dataclass(frozen=True)
class GridBelief:
    """Categorical belief over fixed points ``grid`` (N, 2) with log-probabilities ``logp``."""

    grid: np.ndarray
    logp: np.ndarray

    def __post_init__(self):
        logp = np.asarray(self.logp, dtype=float)
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=float))
        object.__setattr__(self, "logp", logp - logsumexp(logp))

    @classmethod
    def uniform(cls, grid) -> "GridBelief":
        grid = np.asarray(grid, dtype=float)
        return cls(grid, np.zeros(grid.shape[0]))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logp)

    @property
    def mean(self) -> np.ndarray:
        return self.probs @ self.grid

    @property
    def cov(self) -> np.ndarray:
        e = self.grid - self.mean
        return (self.probs[:, None] * e).T @ e

    def tilt(self, obs, weights, var, alpha_v, alpha_r, region) -> "GridBelief":
        return GridBelief(self.grid, self.log_tilt(self, obs, weights, var, alpha_v, alpha_r, region))

    def hidden_mass(self, region: HiddenRegion) -> float:
        return float(self.probs @ region.contains(self.grid))

    def expected_obs_loglik(self, obs, var: float) -> np.ndarray:
        obs = np.asarray(obs, dtype=float).reshape(-1, 2)
        d2 = np.sum((obs[:, None, :] - self.grid) ** 2, axis=-1)
        return (-LOG_2PI - np.log(var) - 0.5 * d2 / var) @ self.probs

    def marginal_obs_loglik(self, obs, var: float) -> np.ndarray:
        obs = np.asarray(obs, dtype=float).reshape(-1, 2)
        d2 = np.sum((obs[:, None, :] - self.grid) ** 2, axis=-1)
        return logsumexp(self.logp - LOG_2PI - np.log(var) - 0.5 * d2 / var, axis=1)

    def kl(self, prior: "GridBelief") -> float:
        p = self.probs
        nz = p > 0
        return float(np.sum(p[nz] * (self.logp[nz] - prior.logp[nz])))

    def std(self) -> float:
        return float(np.sqrt(np.trace(self.cov) / 2))

    def predict(self, var_proc: float) -> "GridBelief":
        if var_proc <= 0:
            return self
        d2 = np.sum((self.grid[:, None, :] - self.grid) ** 2, axis=-1)
        kern = -0.5 * d2 / var_proc
        kern -= logsumexp(kern, axis=1, keepdims=True)
        return GridBelief(self.grid, logsumexp(self.logp[:, None] + kern, axis=0))

    def log_tilt(self, prior, obs, weights, var, alpha_v, alpha_r, region) -> np.ndarray:
        obs, weights = _obs_arrays(obs, weights)
        d2 = np.sum((obs[:, None, :] - self.grid) ** 2, axis=-1)
        ll = weights @ (-LOG_2PI - np.log(var) - 0.5 * d2 / var) if weights.size else 0.0
        return prior.logp + ll + np.where(region.contains(self.grid), alpha_r, alpha_v)

    def local_objective(self, prior, obs, weights, var, alpha_v, alpha_r, region) -> float:
        obs, weights = _obs_arrays(obs, weights)
        val = -self.kl(prior) + alpha_v
        if weights.size:
            val += float(weights @ self.expected_obs_loglik(obs, var))
        val += (alpha_r - alpha_v) * self.hidden_mass(region)
        return val

    def update(self, prior, obs, weights, var, alpha_v, alpha_r, region, max_iters: int = 0):
        """Exact maximiser of the local objective: the normalised tilted density."""
        t = self.log_tilt(prior, obs, weights, var, alpha_v, alpha_r, region)
        return GridBelief(self.grid, t), float(logsumexp(t))

    def to_dict(self) -> dict:
        return {"type": "grid", "grid": self.grid.tolist(), "probs": self.probs.tolist()}
