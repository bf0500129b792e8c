"""Predictive mixtures and the ADE / NCE forecast metrics.

A forecast is summarised per future step by a diagonal Gaussian mixture over
the planar position.  ADE averages the displacement of each component mean
from the truth over steps and then over components by their weights; NCE
does the same for the gap between that displacement and the component's
predicted standard error.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .gaussians import COV_FLOOR, GaussianMixture, fit_diag_gmm_batch
from .trajectory import Trajectory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PredictiveMixture:
    """Per-step diagonal mixtures over ``(x, y)``.

    ``weights`` is (H, K); ``means`` and ``variances`` are (H, K, 2).
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.asarray(self.means, dtype=float)
        var = np.asarray(self.variances, dtype=float)
        if w.ndim != 2 or mu.shape != w.shape + (2,) or var.shape != mu.shape:
            raise ValueError(f"inconsistent shapes {w.shape}, {mu.shape}, {var.shape}")
        if np.any(w < 0) or not np.allclose(w.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("weights must lie on the simplex at every step")
        if np.any(var <= 0) or not np.all(np.isfinite(mu)):
            raise ValueError("variances must be positive and means finite")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            object.__setattr__(self, name, arr)

    @property
    def horizon(self) -> int:
        return self.weights.shape[0]

    @property
    def k(self) -> int:
        return self.weights.shape[1]

    def step(self, h: int) -> GaussianMixture:
        return GaussianMixture(self.weights[h], self.means[h], self.variances[h])

    def translated(self, offset) -> "PredictiveMixture":
        return PredictiveMixture(self.weights, self.means + np.asarray(offset, dtype=float), self.variances)


def predictive_mixture_from_samples(samples, k: int = 10, seed: int = 0, floor: float = COV_FLOOR,
                                    max_iters: int = 100, tol: float = 1e-3) -> PredictiveMixture:
    """Fit one ``k``-component diagonal GMM per future step to sampled futures.

    ``samples`` is a list of future trajectories or an array (S, H, D) whose
    first two features are the position.  The default tolerance on the
    relative log-likelihood change is loose on purpose: tightening it changes
    the metrics by well under one percent while costing several times more.
    """
    if isinstance(samples, np.ndarray):
        arr = samples
    else:
        samples = list(samples)
        if not samples:
            raise ValueError("no samples")
        lengths = {len(s) for s in samples}
        if len(lengths) != 1:
            raise ValueError("all samples must share one horizon")
        arr = np.stack([s.states if isinstance(s, Trajectory) else np.asarray(s) for s in samples])
    arr = np.asarray(arr, dtype=float)
    if arr.ndim != 3 or arr.shape[2] < 2:
        raise ValueError("samples must have shape (S, H, D >= 2)")
    if arr.shape[0] < k:
        raise ValueError(f"need at least k={k} samples, got {arr.shape[0]}")
    fit = fit_diag_gmm_batch(np.swapaxes(arr[:, :, :2], 0, 1), k, seed=seed, floor=floor, max_iters=max_iters,
                             tol=tol)
    return PredictiveMixture(fit.weights, fit.means, fit.variances)


def _truth_positions(truth) -> np.ndarray:
    if isinstance(truth, Trajectory):
        return truth.positions
    arr = np.asarray(truth, dtype=float)
    return arr[:, :2]


def _check(pred: PredictiveMixture, truth) -> np.ndarray:
    x = _truth_positions(truth)
    if x.shape[0] != pred.horizon:
        raise ValueError(f"horizon mismatch: prediction {pred.horizon}, truth {x.shape[0]}")
    return x


def displacement_errors(pred: PredictiveMixture, truth) -> np.ndarray:
    """Euclidean distance of every component mean from the truth, (H, K)."""
    x = _check(pred, truth)
    return np.linalg.norm(pred.means - x[:, None, :], axis=-1)


def ade(pred: PredictiveMixture, truth) -> float:
    """Weight-averaged (per step) mean displacement of the component means."""
    d = displacement_errors(pred, truth)
    return float(np.mean(np.sum(pred.weights * d, axis=1)))


def nce(pred: PredictiveMixture, truth) -> float:
    """Weight-averaged mean of ``|displacement - predicted standard error|``.

    The predicted standard error of a component at a step is the root mean
    of its two per-axis variances.
    """
    d = displacement_errors(pred, truth)
    se = np.sqrt(np.mean(pred.variances, axis=-1))
    return float(np.mean(np.sum(pred.weights * np.abs(d - se), axis=1)))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


class SamplingPredictor:
    """Wraps an rSLDS: sample futures after the context, then fit per-step mixtures."""

    def __init__(self, model, num_samples: int = 300, k: int = 10):
        self.model = model
        self.num_samples = num_samples
        self.k = k

    def supports_context(self, context_len: int) -> bool:
        return context_len >= 1

    def predict(self, context: Trajectory, horizon: int, seed: int = 0) -> PredictiveMixture:
        from .rslds.forecast import forecast

        samples = forecast(self.model, context, horizon, self.num_samples, seed=seed)
        return predictive_mixture_from_samples(samples, self.k, seed=seed)


@dataclass
class SuiteResult:
    """Long-form evaluation rows plus the number of skipped trajectories per cell."""

    rows: list[dict] = field(default_factory=list)
    skipped: int = 0

    def to_csv(self, path) -> None:
        cols = ("model", "context", "horizon", "n", "ade", "nce", "skipped")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["model"], r["context"], r["horizon"], r["n"], f"{r['ade']:.6f}", f"{r['nce']:.6f}",
                            r["skipped"]])

    def table(self) -> str:
        """Aligned text table: one row per model, ADE / NCE per context length."""
        models = list(dict.fromkeys(r["model"] for r in self.rows))
        ctxs = sorted({r["context"] for r in self.rows})
        cell = {(r["model"], r["context"]): r for r in self.rows}
        head = ["model"] + [f"c={c} ADE / NCE" for c in ctxs]
        body = []
        for m in models:
            line = [m]
            for c in ctxs:
                r = cell.get((m, c))
                line.append("-" if r is None else f"{r['ade']:.3f} / {r['nce']:.3f}")
            body.append(line)
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
        fmt = lambda row: "  ".join(v.ljust(w) for v, w in zip(row, widths))  # noqa: E731
        return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in body])

    def lookup(self, model: str, context: int) -> dict:
        for r in self.rows:
            if r["model"] == model and r["context"] == context:
                return r
        raise KeyError((model, context))


def evaluate_suite(models: Mapping[str, object], test: Sequence[Trajectory], context_lengths=(1, 10, 50),
                   horizon: int = 40, seed: int = 0) -> SuiteResult:
    """Score every model at every supported context length on ``test``.

    A model is any object with ``predict(context, horizon, seed)`` returning a
    :class:`PredictiveMixture`; an optional ``supports_context(c)`` restricts
    the context lengths it is scored at.  Trajectories shorter than
    ``context + horizon`` are skipped and counted.
    """
    out = SuiteResult()
    for name, model in models.items():
        for c in context_lengths:
            supports = getattr(model, "supports_context", None)
            if supports is not None and not supports(c):
                continue
            ades, nces, skipped = [], [], 0
            for i, traj in enumerate(test):
                if len(traj) < c + horizon:
                    skipped += 1
                    continue
                pred = model.predict(traj.slice(0, c), horizon, seed=seed + i)
                truth = traj.states[c:c + horizon]
                ades.append(ade(pred, truth))
                nces.append(nce(pred, truth))
            if skipped:
                warnings.warn(f"{name}, context {c}: skipped {skipped} short trajectories", stacklevel=2)
            out.skipped += skipped
            if not ades:
                continue
            out.rows.append({"model": name, "context": int(c), "horizon": int(horizon), "n": len(ades),
                             "ade": float(np.mean(ades)), "nce": float(np.mean(nces)), "skipped": skipped})
            log.info("%s c=%d: ADE %.3f NCE %.3f", name, c, out.rows[-1]["ade"], out.rows[-1]["nce"])
    return out
