"""Dense Gaussian and Gaussian-mixture primitives.

Every other module builds on these: densities, sampling, EM fitting of
mixtures (full or diagonal covariance) and moment matching.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))
COV_FLOOR = 1e-6


def _symmetrize(cov: np.ndarray) -> np.ndarray:
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def clip_eigenvalues(cov: np.ndarray, floor: float = COV_FLOOR) -> np.ndarray:
    """Raise every eigenvalue of a symmetric matrix (or stack) to at least ``floor``."""
    cov = _symmetrize(np.asarray(cov, dtype=float))
    w, v = np.linalg.eigh(cov)
    if np.all(w >= floor):
        return cov
    w = np.maximum(w, floor)
    return _symmetrize((v * w[..., None, :]) @ np.swapaxes(v, -1, -2))


@dataclass(frozen=True)
class Gaussian:
    """Multivariate normal with a symmetric positive-definite covariance."""

    mean: np.ndarray
    cov: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"covariance shape {cov.shape} does not match mean dimension {d}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("Gaussian parameters must be finite")
        scale = max(np.max(np.abs(cov)), 1e-300)
        if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        cov = _symmetrize(cov)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def regularized(cls, mean, cov, floor: float = COV_FLOOR) -> "Gaussian":
        """Build a Gaussian after clipping covariance eigenvalues at ``floor``."""
        return cls(mean, clip_eigenvalues(np.atleast_2d(cov), floor))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def logpdf(self, x) -> np.ndarray | float:
        return gaussian_logpdf(x, self)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self._chol.T

    def entropy(self) -> float:
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        return 0.5 * (self.dim * (1.0 + LOG_2PI) + logdet)


def gaussian_logpdf(x, g: Gaussian):
    """Log density of ``g`` at ``x``; ``x`` may be a single vector or an (N, D) batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    x = np.atleast_2d(x)
    if x.shape[-1] != g.dim:
        raise ValueError(f"point dimension {x.shape[-1]} != Gaussian dimension {g.dim}")
    diff = x - g.mean
    sol = linalg.solve_triangular(g._chol, diff.T, lower=True)
    maha = np.sum(sol**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(g._chol)))
    out = -0.5 * (g.dim * LOG_2PI + logdet + maha)
    return float(out[0]) if single else out


class GaussianMixture:
    """Weighted mixture of Gaussians stored as stacked arrays.

    Parameters
    ----------
    weights : (K,) probability vector.
    means : (K, D) component means.
    covs : (K, D, D) component covariances, or (K, D) diagonal variances.
    """

    def __init__(self, weights, means, covs):
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        mu = np.atleast_2d(np.asarray(means, dtype=float))
        c = np.asarray(covs, dtype=float)
        if w.size == 0:
            raise ValueError("mixture needs at least one component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must lie on the probability simplex")
        if mu.shape[0] != w.size:
            raise ValueError("one mean per weight required")
        if c.ndim == 2:
            c = np.stack([np.diag(row) for row in c])
        if c.shape != (w.size, mu.shape[1], mu.shape[1]):
            raise ValueError(f"covariance stack has shape {c.shape}")
        self.weights = w
        self.means = mu
        self.covs = _symmetrize(c)
        self._chols = np.linalg.cholesky(self.covs)

    @classmethod
    def from_components(cls, weights: Sequence[float], components: Sequence[Gaussian]) -> "GaussianMixture":
        if len(components) == 0:
            raise ValueError("mixture needs at least one component")
        return cls(weights, np.stack([g.mean for g in components]), np.stack([g.cov for g in components]))

    @property
    def k(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[Gaussian]:
        return [Gaussian(m, c) for m, c in zip(self.means, self.covs)]

    def component_logpdf(self, x) -> np.ndarray:
        """(N, K) matrix of per-component log densities."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.dim:
            raise ValueError(f"point dimension {x.shape[-1]} != mixture dimension {self.dim}")
        diff = x[:, None, :] - self.means[None]
        sol = np.linalg.solve(self._chols[None], diff[..., None])[..., 0]
        maha = np.sum(sol**2, axis=-1)
        logdet = 2.0 * np.sum(np.log(np.diagonal(self._chols, axis1=1, axis2=2)), axis=-1)
        return -0.5 * (self.dim * LOG_2PI + logdet[None] + maha)

    def logpdf(self, x):
        return mixture_logpdf(x, self)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(self.k, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[idx] + np.einsum("nij,nj->ni", self._chols[idx], z)


def mixture_logpdf(x, gmm: GaussianMixture):
    """Log density of a mixture, evaluated with log-sum-exp."""
    if gmm is None or gmm.k == 0:
        raise ValueError("empty mixture")
    single = np.asarray(x).ndim <= 1
    lp = gmm.component_logpdf(x)
    with np.errstate(divide="ignore"):
        logw = np.log(gmm.weights)
    out = logsumexp(lp + logw[None], axis=1)
    return float(out[0]) if single else out


def moment_match(gmm: GaussianMixture) -> Gaussian:
    """Single Gaussian with the mixture's first two moments."""
    w = gmm.weights
    mean = w @ gmm.means
    spread = gmm.means - mean
    cov = np.einsum("k,kij->ij", w, gmm.covs) + np.einsum("k,ki,kj->ij", w, spread, spread)
    return Gaussian(mean, _symmetrize(cov))


# ---------------------------------------------------------------------------
# EM fitting
# ---------------------------------------------------------------------------


@dataclass
class EMTrace:
    """Per-iteration average log-likelihood of an EM run."""

    log_likelihood: list[float] = field(default_factory=list)
    reinit_iterations: list[int] = field(default_factory=list)
    converged: bool = False


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``k`` seed points chosen by D^2 weighting."""
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    d2 = np.sum((x - x[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return np.asarray(idx)


def fit_gmm_em_trace(
    samples,
    k: int,
    seed: int = 0,
    max_iters: int = 200,
    tol: float = 1e-6,
    covariance_type: str = "full",
    floor: float = COV_FLOOR,
) -> tuple[GaussianMixture, EMTrace]:
    """EM for a ``k``-component mixture, returning the fit and its trace.

    Covariances are floored by eigenvalue clipping at ``floor``, which is the
    exact constrained maximizer and so keeps the likelihood trace monotone.
    Components whose responsibility mass vanishes are re-seeded at the sample
    with the lowest likelihood.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if k < 1:
        raise ValueError("k must be at least 1")
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    if covariance_type not in ("full", "diag"):
        raise ValueError(f"unknown covariance_type {covariance_type!r}")
    rng = np.random.default_rng(seed)

    data_var = np.maximum(x.var(axis=0), floor)
    means = x[kmeans_plus_plus(x, k, rng)].copy()
    if covariance_type == "full":
        covs = np.repeat(np.diag(data_var)[None], k, axis=0)
    else:
        covs = np.repeat(data_var[None], k, axis=0)
    weights = np.full(k, 1.0 / k)

    trace = EMTrace()
    prev = -np.inf
    for it in range(max_iters):
        gmm = GaussianMixture(weights, means, covs)
        lp = gmm.component_logpdf(x) + np.log(weights)[None]
        norm = logsumexp(lp, axis=1)
        ll = float(norm.mean())
        trace.log_likelihood.append(ll)
        if np.isfinite(prev) and abs(ll - prev) <= tol * abs(prev) and it not in trace.reinit_iterations:
            trace.converged = True
            break
        prev = ll
        resp = np.exp(lp - norm[:, None])
        nk = resp.sum(axis=0)

        empty = np.flatnonzero(nk < 1e-8)
        means = (resp.T @ x) / np.maximum(nk, 1e-300)[:, None]
        weights = nk / n
        if covariance_type == "full":
            diff = x[:, None, :] - means[None]
            covs = np.einsum("nk,nki,nkj->kij", resp, diff, diff) / np.maximum(nk, 1e-300)[:, None, None]
            covs = clip_eigenvalues(covs, floor)
        else:
            covs = (resp.T @ (x**2)) / np.maximum(nk, 1e-300)[:, None] - means**2
            covs = np.maximum(covs, floor)
        if empty.size:
            order = np.argsort(norm)
            for j, comp in enumerate(empty):
                means[comp] = x[order[j % n]]
                covs[comp] = np.diag(data_var) if covariance_type == "full" else data_var
                weights[comp] = 1.0 / n
            weights = weights / weights.sum()
            trace.reinit_iterations.append(it + 1)
    return GaussianMixture(weights, means, covs), trace


def fit_gmm_em(samples, k: int, seed: int = 0, max_iters: int = 200, tol: float = 1e-6,
               covariance_type: str = "full", floor: float = COV_FLOOR) -> GaussianMixture:
    """Fit a ``k``-component Gaussian mixture by EM (k-means++ seeding)."""
    gmm, _ = fit_gmm_em_trace(samples, k, seed, max_iters, tol, covariance_type, floor)
    return gmm


@dataclass
class DiagGMMBatch:
    """A batch of independent diagonal-covariance mixtures.

    ``weights`` is (B, K), ``means`` and ``variances`` are (B, K, D).
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: np.ndarray  # (iterations, B); NaN once an element has stopped
    converged: np.ndarray

    def mixture(self, b: int) -> GaussianMixture:
        return GaussianMixture(self.weights[b], self.means[b], self.variances[b])


def _diag_component_logpdf(x, means, variances):
    # x (B, N, D); means/variances (B, K, D) -> (B, N, K)
    inv = 1.0 / variances
    if x.shape[-1] <= 8:
        # few dimensions: accumulate per axis, avoiding a 4-D temporary
        quad = np.zeros((x.shape[0], x.shape[1], means.shape[1]))
        for d in range(x.shape[-1]):
            quad += (x[:, :, d, None] - means[:, None, :, d]) ** 2 * inv[:, None, :, d]
    else:
        quad = (
            np.matmul(x**2, np.swapaxes(inv, 1, 2))
            - 2.0 * np.matmul(x, np.swapaxes(means * inv, 1, 2))
            + np.sum(means**2 * inv, axis=-1)[:, None, :]
        )
        quad = np.maximum(quad, 0.0)
    logdet = np.sum(np.log(variances), axis=-1)[:, None, :]
    return -0.5 * (x.shape[-1] * LOG_2PI + logdet + quad)


def _lse_last(a):
    m = a.max(axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=-1, keepdims=True)))[..., 0]


def fit_diag_gmm_batch(
    samples,
    k: int,
    seed: int = 0,
    max_iters: int = 200,
    tol: float = 1e-6,
    floor: float = COV_FLOOR,
) -> DiagGMMBatch:
    """Fit B independent diagonal GMMs to ``samples`` of shape (B, N, D) at once.

    Same algorithm as :func:`fit_gmm_em` with ``covariance_type="diag"``,
    vectorised over the leading batch axis; elements stop updating once
    their relative log-likelihood change drops below ``tol``.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 3:
        raise ValueError("samples must have shape (B, N, D)")
    bsz, n, d = x.shape
    if k < 1:
        raise ValueError("k must be at least 1")
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    rng = np.random.default_rng(seed)

    # batched k-means++ seeding
    data_var = np.maximum(x.var(axis=1), floor)  # (B, D)
    bidx = np.arange(bsz)
    first = rng.integers(n, size=bsz)
    centers = [x[bidx, first]]
    d2 = np.sum((x - centers[0][:, None]) ** 2, axis=-1)
    for _ in range(1, k):
        total = d2.sum(axis=1, keepdims=True)
        u = rng.random(bsz)
        cdf = np.cumsum(np.where(total > 0, d2 / np.where(total > 0, total, 1.0), 1.0 / n), axis=1)
        nxt = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(axis=1), n - 1)
        c = x[bidx, nxt]
        centers.append(c)
        d2 = np.minimum(d2, np.sum((x - c[:, None]) ** 2, axis=-1))
    means = np.stack(centers, axis=1)
    variances = np.repeat(data_var[:, None, :], k, axis=1)
    weights = np.full((bsz, k), 1.0 / k)

    active = np.ones(bsz, dtype=bool)
    converged = np.zeros(bsz, dtype=bool)
    prev = np.full(bsz, -np.inf)
    history = []
    for _ in range(max_iters):
        ids = np.flatnonzero(active)
        if ids.size == 0:
            break
        xa = x[ids]
        lp = _diag_component_logpdf(xa, means[ids], variances[ids]) + np.log(weights[ids])[:, None, :]
        norm = _lse_last(lp)
        ll = norm.mean(axis=1)
        row = np.full(bsz, np.nan)
        row[ids] = ll
        history.append(row)
        with np.errstate(invalid="ignore"):
            done = np.isfinite(prev[ids]) & (np.abs(ll - prev[ids]) <= tol * np.abs(prev[ids]))
        converged[ids[done]] = True
        active[ids[done]] = False
        prev[ids] = ll
        upd = ~done
        ids, xa, lp, norm = ids[upd], xa[upd], lp[upd], norm[upd]
        if ids.size == 0:
            break
        resp = np.exp(lp - norm[..., None])
        nk = resp.sum(axis=1)  # (b, K)
        safe = np.maximum(nk, 1e-300)[..., None]
        rt = np.swapaxes(resp, 1, 2)
        mu = np.matmul(rt, xa) / safe
        var = np.matmul(rt, xa**2) / safe - mu**2
        var = np.maximum(var, floor)
        w = nk / n
        empty_b, empty_k = np.nonzero(nk < 1e-8)
        if empty_b.size:
            worst = np.argsort(norm, axis=1)
            counts: dict[int, int] = {}
            for bb, kk in zip(empty_b, empty_k):
                j = counts.get(bb, 0)
                counts[bb] = j + 1
                mu[bb, kk] = xa[bb, worst[bb, j % n]]
                var[bb, kk] = data_var[ids[bb]]
                w[bb, kk] = 1.0 / n
            w = w / w.sum(axis=1, keepdims=True)
            prev[ids[np.unique(empty_b)]] = -np.inf
        means[ids], variances[ids], weights[ids] = mu, var, w
    return DiagGMMBatch(weights, means, variances, np.asarray(history).reshape(-1, bsz), converged)
