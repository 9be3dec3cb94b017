"""DDPM schedule, analytic Gaussian-mixture prior and ancestral sampling.

Steps run over ``t = 0..T`` with ``alpha_bar[0] = 1``, so the posterior
mean/variance at ``t = 1`` are well defined (the last reverse step is
noise free). The denoiser is replaced by the closed-form score of a
diagonal-covariance Gaussian mixture diffused to time ``t``:

    p_t(z) = sum_k w_k N(sqrt(ab_t) m_k, ab_t C_k + (1 - ab_t) I).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .latentcodec import BLOCK, LatentTensor
from .rng import stream

VAR_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Linear-beta schedule; arrays are indexed by step ``t = 0..T``."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float = 1e-4
    beta_end: float = 0.02
    delta: Optional[float] = None  # None: use sigma_t^2 at each step

    def sigma_sq(self, t: int) -> float:
        b = self.betas[t]
        return float(b * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]))

    def guidance_variance(self, t: int) -> float:
        return self.sigma_sq(t) if self.delta is None else float(self.delta)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  delta: Optional[float] = None) -> DiffusionSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if delta is not None and delta <= 0:
        raise ValueError("delta must be positive")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for a in (betas, alphas, alpha_bars):
        a.flags.writeable = False
    return DiffusionSchedule(T, betas, alphas, alpha_bars, beta_start, beta_end, delta)


def _check_step(t: int, sched: DiffusionSchedule, lo: int = 1):
    if not (lo <= t <= sched.T):
        raise ValueError(f"step {t} outside [{lo}, {sched.T}]")


def _arr(z):
    return z.coeffs if isinstance(z, LatentTensor) else np.asarray(z, dtype=np.float64)


def _wrap(like, arr):
    return like.replace(arr) if isinstance(like, LatentTensor) else arr


def forward_noise(z0, t: int, eps, sched: DiffusionSchedule):
    """``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``."""
    _check_step(t, sched)
    ab = sched.alpha_bars[t]
    return _wrap(z0, math.sqrt(ab) * _arr(z0) + math.sqrt(1.0 - ab) * _arr(eps))


def predict_z0(z_t, t: int, eps_theta, sched: DiffusionSchedule):
    _check_step(t, sched)
    ab = sched.alpha_bars[t]
    return _wrap(z_t, (_arr(z_t) - math.sqrt(1.0 - ab) * _arr(eps_theta)) / math.sqrt(ab))


def posterior_mean_var(z_t, z0_hat, t: int, sched: DiffusionSchedule):
    """Mean and variance of q(z_{t-1} | z_t, z0_hat)."""
    if t == 0:
        raise ValueError("posterior is undefined at t = 0")
    _check_step(t, sched)
    ab_prev, ab = sched.alpha_bars[t - 1], sched.alpha_bars[t]
    beta, alpha = sched.betas[t], sched.alphas[t]
    mu = (math.sqrt(ab_prev) * beta * _arr(z0_hat)
          + math.sqrt(alpha) * (1.0 - ab_prev) * _arr(z_t)) / (1.0 - ab)
    return _wrap(z_t, mu), float(beta * (1.0 - ab_prev) / (1.0 - ab))


def posterior_mean_var_scalar(z_t: float, z0_hat: float, alpha_bar_prev: float,
                              beta: float):
    """Same formula with explicit scalars (``ab_t = ab_prev * (1 - beta)``)."""
    ab = alpha_bar_prev * (1.0 - beta)
    if ab == 1.0:
        return z_t, 0.0
    mu = (math.sqrt(alpha_bar_prev) * beta * z0_hat
          + math.sqrt(1.0 - beta) * (1.0 - alpha_bar_prev) * z_t) / (1.0 - ab)
    return mu, beta * (1.0 - alpha_bar_prev) / (1.0 - ab)


# --------------------------------------------------------------------------
# Gaussian mixture prior

@dataclass(frozen=True, eq=False)
class GmmPrior:
    weights: np.ndarray      # (K,)
    means: np.ndarray        # (K, D)
    variances: np.ndarray    # (K, D)
    shape: tuple             # latent shape, prod(shape) == D
    block: int = BLOCK

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if abs(w.sum() - 1.0) > 1e-12 or np.any(w <= 0):
            raise ValueError("mixture weights must be positive and sum to 1")
        if m.shape != v.shape or m.shape[0] != w.size:
            raise ValueError("inconsistent mixture parameter shapes")
        if int(np.prod(self.shape)) != m.shape[1]:
            raise ValueError(f"shape {self.shape} does not match dimension {m.shape[1]}")
        v = np.maximum(v, VAR_FLOOR)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @property
    def K(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_json(self) -> str:
        return json.dumps({"version": 1, "shape": list(self.shape), "block": self.block,
                           "weights": self.weights.tolist(), "means": self.means.tolist(),
                           "variances": self.variances.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "GmmPrior":
        d = json.loads(text)
        return cls(np.array(d["weights"]), np.array(d["means"]), np.array(d["variances"]),
                   tuple(d["shape"]), d.get("block", BLOCK))


def _component_loglik(X, means, variances):
    # X (N, D) -> (N, K) diagonal Gaussian log densities
    inv = 1.0 / variances
    quad = (X * X) @ inv.T - 2.0 * X @ (means * inv).T + np.sum(means * means * inv, axis=1)
    logdet = np.sum(np.log(2.0 * np.pi * variances), axis=1)
    return -0.5 * (quad + logdet)


def _kmeanspp(X, K, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


@dataclass
class GmmFit:
    prior: GmmPrior
    loglik: list = field(default_factory=list)


def fit_gmm(latents: Sequence, K: int = 5, seed: int = 0, iters: int = 50,
            tol: float = 1e-8, return_trace: bool = False):
    """Diagonal-covariance EM initialised with k-means++.

    ``latents`` are LatentTensors or arrays of one common shape. A component
    that collapses is reseeded once at the worst-explained sample; a second
    collapse raises ``ValueError``. With ``return_trace`` the per-iteration
    mean log-likelihood is returned alongside the prior.
    """
    arrs = [_arr(z) for z in latents]
    if len(arrs) < K:
        raise ValueError(f"need at least K={K} samples, got {len(arrs)}")
    shape = arrs[0].shape
    block = latents[0].block if isinstance(latents[0], LatentTensor) else BLOCK
    X = np.stack([a.reshape(-1) for a in arrs])
    n, dim = X.shape
    rng = stream(seed, "gmm-init")
    global_var = np.maximum(X.var(axis=0), VAR_FLOOR)

    means = _kmeanspp(X, K, rng)
    d2 = ((X[:, None, :] - means[None]) ** 2).sum(-1)
    labels = np.argmin(d2, axis=1)
    variances = np.empty((K, dim))
    weights = np.empty(K)
    for k in range(K):
        sel = X[labels == k]
        weights[k] = max(len(sel), 1)
        variances[k] = sel.var(axis=0) if len(sel) > 1 else global_var
    weights /= weights.sum()
    variances = np.maximum(variances, VAR_FLOOR)

    reseeded = np.zeros(K, dtype=bool)
    trace = []
    for _ in range(iters):
        logp = _component_loglik(X, means, variances) + np.log(weights)
        norm = logsumexp(logp, axis=1)
        trace.append(float(norm.mean()))
        if len(trace) > 1 and trace[-1] - trace[-2] < tol * max(1.0, abs(trace[-2])):
            break
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        for k in np.flatnonzero(nk < 1e-10):
            if reseeded[k]:
                raise ValueError(f"mixture component {k} emptied twice")
            reseeded[k] = True
            worst = int(np.argmin(norm))
            resp[:, k] = 0.0
            resp[worst] = 0.0
            resp[worst, k] = 1.0
            nk = resp.sum(axis=0)
        weights = nk / n
        means = (resp.T @ X) / nk[:, None]
        variances = (resp.T @ (X * X)) / nk[:, None] - means * means
        variances = np.maximum(variances, VAR_FLOOR)
    else:
        logp = _component_loglik(X, means, variances) + np.log(weights)
        trace.append(float(logsumexp(logp, axis=1).mean()))

    weights = weights / weights.sum()
    prior = GmmPrior(weights, means, variances, shape, block)
    return (prior, trace) if return_trace else prior


def gmm_logpdf(prior: GmmPrior, z, t: int, sched: DiffusionSchedule) -> float:
    """log p_t(z) of the diffused mixture (t = 0 gives the prior itself)."""
    zf = _arr(z).reshape(1, -1)
    ab = sched.alpha_bars[t]
    m = math.sqrt(ab) * prior.means
    v = ab * prior.variances + (1.0 - ab)
    return float(logsumexp(_component_loglik(zf, m, v)[0] + np.log(prior.weights)))


def _mixture_terms(prior: GmmPrior, zf: np.ndarray, ab: float):
    m = math.sqrt(ab) * prior.means
    v = ab * prior.variances + (1.0 - ab)
    logp = _component_loglik(zf[None], m, v)[0] + np.log(prior.weights)
    r = np.exp(logp - logsumexp(logp))
    sk = -(zf[None] - m) / v
    return r, sk, v


def score_and_eps(prior: GmmPrior, z, t: int, sched: DiffusionSchedule):
    """Closed-form score of p_t and the matching noise prediction."""
    _check_step(t, sched, lo=0)
    zf = _arr(z).reshape(-1)
    ab = sched.alpha_bars[t]
    r, sk, _ = _mixture_terms(prior, zf, ab)
    score = (r @ sk).reshape(_arr(z).shape)
    eps = -math.sqrt(1.0 - ab) * score
    return _wrap(z, score), _wrap(z, eps)


def denoise(prior: GmmPrior, z_t: np.ndarray, t: int, sched: DiffusionSchedule,
            with_terms: bool = False):
    """Tweedie estimate ``z0_hat`` for array ``z_t``; optionally keep mixture terms."""
    ab = sched.alpha_bars[t]
    zf = z_t.reshape(-1)
    r, sk, v = _mixture_terms(prior, zf, ab)
    score = r @ sk
    z0 = ((zf + (1.0 - ab) * score) / math.sqrt(ab)).reshape(z_t.shape)
    if with_terms:
        return z0, (r, sk, v, score, ab)
    return z0


def denoise_vjp(terms, u: np.ndarray) -> np.ndarray:
    """``(d z0_hat / d z_t)^T u`` using the exact Hessian of log p_t."""
    r, sk, v, score, ab = terms
    uf = u.reshape(-1)
    hu = -(r[:, None] * (uf[None] / v)).sum(0) + (r * (sk @ uf)) @ sk - score * (score @ uf)
    return ((uf + (1.0 - ab) * hu) / math.sqrt(ab)).reshape(u.shape)


# --------------------------------------------------------------------------
# sampling

@dataclass
class SamplerState:
    z: np.ndarray
    t: int
    rng: np.random.Generator
    trace: list = field(default_factory=list)


def init_state(shape, seed: int, T: int) -> SamplerState:
    rng = stream(seed, "sampler")
    return SamplerState(rng.standard_normal(shape), T, rng)


def ancestral_step(state: SamplerState, prior: GmmPrior, sched: DiffusionSchedule) -> SamplerState:
    t = state.t
    z0 = denoise(prior, state.z, t, sched)
    mu, var = posterior_mean_var(state.z, z0, t, sched)
    xi = state.rng.standard_normal(state.z.shape)
    state.trace.append({"t": t, "z0_norm": float(np.linalg.norm(z0))})
    state.z = mu + math.sqrt(var) * xi
    state.t = t - 1
    return state


def ancestral_sample(prior: GmmPrior, sched: DiffusionSchedule, seed: int = 0,
                     return_state: bool = False):
    """Unguided reverse chain from ``z_T ~ N(0, I)`` down to ``z_0``."""
    state = init_state(prior.shape, seed, sched.T)
    while state.t > 0:
        ancestral_step(state, prior, sched)
    z = LatentTensor(state.z, prior.block)
    return (z, state) if return_state else z
