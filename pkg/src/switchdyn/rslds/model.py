"""Recurrent switching linear dynamical system: parameters, transitions, sampling."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import softmax

from ..gaussians import COV_FLOOR, clip_eigenvalues
from ..trajectory import DT, AgentState, Trajectory


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable log-softmax; much cheaper than the scipy version on small axes."""
    x = x - np.max(x, axis=axis, keepdims=True)
    return x - np.log(np.sum(np.exp(x), axis=axis, keepdims=True))


def factored_softmax_terms(R: np.ndarray, u: np.ndarray):
    """Softmax normalisers of ``logits[..., z, k] = R[z, k] + u[..., k]`` without forming them.

    Returns ``(eR, eu, Z, lse)`` with ``exp(logits) = eR[z, k] eu[..., k] exp(shift)``,
    ``Z = sum_k eR eu`` of shape (..., K) and ``lse`` the exact log normalisers.
    Rows whose factored sum underflows are recomputed directly.
    """
    mR = R.max(axis=1)
    mu = u.max(axis=-1)
    eR = np.exp(R - mR[:, None])
    eu = np.exp(u - mu[..., None])
    Z = eu @ eR.T
    bad = ~(Z > 1e-250)
    with np.errstate(divide="ignore"):
        lse = np.log(Z) + mR + mu[..., None]
    if np.any(bad):
        idx = np.nonzero(bad)
        full = R[idx[-1]] + u[idx[:-1]]
        m = full.max(axis=-1)
        lse[idx] = m + np.log(np.sum(np.exp(full - m[:, None]), axis=-1))
    return eR, eu, Z, lse

VARIANTS = ("full", "recurrent-only")


@dataclass
class RSLDSModel:
    """Parameters of an rSLDS over the feature vector ``(x, y, vx, vy)``.

    Regime ``z`` moves the continuous state by ``s' = A[z] s + b[z] + N(0, Q[z])``.
    Regime transitions use the logits ``R[z_prev] + W @ s_prev + r``; in the
    recurrent-only variant ``R`` is pinned at zero so the next regime depends on
    the continuous state alone.  Observations are ``y = C s + d + N(0, S)``.
    """

    A: np.ndarray  # (K, D, D)
    b: np.ndarray  # (K, D)
    Q: np.ndarray  # (K, D, D)
    R: np.ndarray  # (K, K)
    W: np.ndarray  # (K, D)
    r: np.ndarray  # (K,)
    pi0: np.ndarray  # (K,)
    mu0: np.ndarray  # (K, D)
    Sigma0: np.ndarray  # (K, D, D)
    C: np.ndarray | None = None
    d: np.ndarray | None = None
    S: np.ndarray | None = None
    variant: str = "full"
    dt: float = DT
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("A", "b", "Q", "R", "W", "r", "pi0", "mu0", "Sigma0"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        k, dim = self.b.shape
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.A.shape != (k, dim, dim) or self.Q.shape != (k, dim, dim):
            raise ValueError("dynamics arrays have inconsistent shapes")
        if self.R.shape != (k, k) or self.W.shape != (k, dim) or self.r.shape != (k,):
            raise ValueError("transition arrays have inconsistent shapes")
        if self.pi0.shape != (k,) or abs(self.pi0.sum() - 1.0) > 1e-9 or np.any(self.pi0 < 0):
            raise ValueError("pi0 must be a probability vector over regimes")
        self.C = np.eye(dim) if self.C is None else np.asarray(self.C, dtype=float)
        self.d = np.zeros(self.C.shape[0]) if self.d is None else np.asarray(self.d, dtype=float)
        self.S = 1e-6 * np.eye(self.C.shape[0]) if self.S is None else np.asarray(self.S, dtype=float)
        if self.variant == "recurrent-only":
            self.R = np.zeros((k, k))
        for q in self.Q:
            np.linalg.cholesky(q)

    @property
    def num_regimes(self) -> int:
        return self.b.shape[0]

    @property
    def dim(self) -> int:
        return self.b.shape[1]

    def copy(self, **changes) -> "RSLDSModel":
        fields = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        fields["meta"] = dict(self.meta)
        fields.update(changes)
        return RSLDSModel(**fields)

    # -- transitions -----------------------------------------------------

    def transition_logits(self, s_prev) -> np.ndarray:
        """Logits of shape ``(..., K, K)`` indexed ``[z_prev, z_next]``."""
        s_prev = np.asarray(s_prev, dtype=float)
        state_term = s_prev @ self.W.T + self.r  # (..., K)
        return self.R + state_term[..., None, :]

    def log_transition_matrix(self, s_prev) -> np.ndarray:
        return log_softmax(self.transition_logits(s_prev), axis=-1)

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        out = {name: getattr(self, name).tolist()
               for name in ("A", "b", "Q", "R", "W", "r", "pi0", "mu0", "Sigma0", "C", "d", "S")}
        out.update(num_regimes=self.num_regimes, dim=self.dim, variant=self.variant, dt=self.dt,
                   meta=self.meta)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RSLDSModel":
        arrays = {name: np.asarray(data[name], dtype=float)
                  for name in ("A", "b", "Q", "R", "W", "r", "pi0", "mu0", "Sigma0", "C", "d", "S")}
        return cls(**arrays, variant=data.get("variant", "full"), dt=float(data.get("dt", DT)),
                   meta=dict(data.get("meta", {})))


def make_model(A, b, Q, *, R=None, W=None, r=None, pi0=None, mu0=None, Sigma0=None,
               variant: str = "full", S=None, C=None, d=None, dt: float = DT) -> RSLDSModel:
    """Build a model from dynamics, filling unspecified parameters with neutral values."""
    A = np.asarray(A, dtype=float)
    if A.ndim == 2:
        A = A[None]
    k, dim, _ = A.shape
    b = np.broadcast_to(np.asarray(b, dtype=float), (k, dim)).copy()
    Q = np.asarray(Q, dtype=float)
    Q = np.broadcast_to(Q if Q.ndim == 3 else Q[None], (k, dim, dim)).copy()
    return RSLDSModel(
        A=A, b=b, Q=Q,
        R=np.zeros((k, k)) if R is None else R,
        W=np.zeros((k, dim)) if W is None else W,
        r=np.zeros(k) if r is None else r,
        pi0=np.full(k, 1.0 / k) if pi0 is None else pi0,
        mu0=np.zeros((k, dim)) if mu0 is None else np.broadcast_to(mu0, (k, dim)).copy(),
        Sigma0=np.broadcast_to(np.eye(dim), (k, dim, dim)).copy() if Sigma0 is None
        else np.broadcast_to(Sigma0, (k, dim, dim)).copy(),
        C=C, d=d, S=S, variant=variant, dt=dt,
    )


def transition_probs(model: RSLDSModel, z_prev: int, s_prev) -> np.ndarray:
    """Distribution of the next regime given the previous regime and state."""
    k = model.num_regimes
    if not 0 <= int(z_prev) < k:
        raise IndexError(f"regime index {z_prev} outside [0, {k})")
    if isinstance(s_prev, AgentState):
        s_prev = s_prev.features
    return softmax(model.transition_logits(s_prev)[int(z_prev)])


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs`` (..., K)."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None] * cdf[..., -1:]
    return np.minimum((cdf < u).sum(axis=-1), probs.shape[-1] - 1)


def _initial_regime_logits(model: RSLDSModel, s0: np.ndarray) -> np.ndarray:
    from ..gaussians import LOG_2PI

    diff = s0[..., None, :] - model.mu0
    sol = np.linalg.solve(model.Sigma0, diff[..., None])[..., 0]
    _, logdet = np.linalg.slogdet(model.Sigma0)
    ll = -0.5 * (model.dim * LOG_2PI + logdet + np.sum(diff * sol, axis=-1))
    with np.errstate(divide="ignore"):
        return np.log(model.pi0) + ll


def simulate(model: RSLDSModel, T: int, rng: np.random.Generator, n: int = 1,
             init=None) -> tuple[np.ndarray, np.ndarray]:
    """Ancestral sampling of ``n`` paths of length ``T``.

    Returns states ``(n, T, D)`` and regimes ``(n, T)``.  ``init`` (``(D,)`` or
    ``(n, D)``) fixes the first state; its regime is then drawn from the
    posterior over initial regimes.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    k, dim = model.num_regimes, model.dim
    states = np.empty((n, T, dim))
    regimes = np.empty((n, T), dtype=int)
    chol_q = np.linalg.cholesky(model.Q)
    if init is None:
        z = _categorical(rng, np.broadcast_to(model.pi0, (n, k)))
        chol0 = np.linalg.cholesky(model.Sigma0)
        s = model.mu0[z] + np.einsum("nij,nj->ni", chol0[z], rng.standard_normal((n, dim)))
    else:
        s = np.broadcast_to(np.asarray(init, dtype=float), (n, dim)).copy()
        z = _categorical(rng, softmax(_initial_regime_logits(model, s), axis=-1))
    states[:, 0], regimes[:, 0] = s, z
    for t in range(1, T):
        logits = model.transition_logits(s)[np.arange(n), z]
        z = _categorical(rng, softmax(logits, axis=-1))
        noise = np.einsum("nij,nj->ni", chol_q[z], rng.standard_normal((n, dim)))
        s = np.einsum("nij,nj->ni", model.A[z], s) + model.b[z] + noise
        states[:, t], regimes[:, t] = s, z
    return states, regimes


def sample_trajectory(model: RSLDSModel, T: int, seed: int = 0, init: AgentState | None = None,
                      kind: str = "vehicle") -> tuple[Trajectory, np.ndarray]:
    """Draw one trajectory and its regime sequence."""
    rng = np.random.default_rng(seed)
    init_vec = None if init is None else init.features
    states, regimes = simulate(model, T, rng, n=1, init=init_vec)
    return Trajectory(states[0], dt=model.dt, kind=kind), regimes[0]


def floor_covariances(model: RSLDSModel, floor: float = COV_FLOOR) -> RSLDSModel:
    return replace(model, Q=clip_eigenvalues(model.Q, floor), Sigma0=clip_eigenvalues(model.Sigma0, floor))
