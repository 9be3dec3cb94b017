"""Generalized Gaussian distribution: density, sampling, fitting and KL divergence.

A GGD with shape ``alpha`` and standard deviation ``sigma`` has density

    p(x) = alpha / (2 beta Gamma(1/alpha)) * exp(-(|x|/beta)^alpha),
    beta = sigma * sqrt(Gamma(1/alpha) / Gamma(3/alpha)).

All Gamma evaluations go through :func:`log_gamma` and ratios are formed in
log space, so shapes down to 0.05 do not overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .rng import stream

ALPHA_MIN = 0.05
ALPHA_MAX = 20.0
VARIANTS = ("corrected", "as_printed")


class DegenerateInputError(ValueError):
    """Samples are (near) constant, so no scale/shape can be fitted."""


@dataclass(frozen=True)
class GgdParams:
    alpha: float
    sigma: float
    # set by ggd_fit when the moment ratio fell outside the searchable range
    clamped: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive and finite, got {self.alpha}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma}")

    @property
    def beta(self) -> float:
        return ggd_beta(self)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "sigma": self.sigma}


def log_gamma(z):
    """ln Gamma(z) for z > 0 (scalar or array)."""
    arr = np.asarray(z, dtype=np.float64)
    if np.any(~(arr > 0)):
        raise ValueError("log_gamma is defined here only for z > 0")
    out = special.gammaln(arr)
    return float(out) if out.ndim == 0 else out


def _log_beta_ratio(alpha):
    # ln(beta / sigma)
    return 0.5 * (log_gamma(1.0 / alpha) - log_gamma(3.0 / alpha))


def ggd_beta(p: GgdParams) -> float:
    return p.sigma * math.exp(_log_beta_ratio(p.alpha))


def ggd_pdf(x, p: GgdParams):
    b = ggd_beta(p)
    log_norm = math.log(p.alpha) - math.log(2.0 * b) - log_gamma(1.0 / p.alpha)
    x = np.asarray(x, dtype=np.float64)
    out = np.exp(log_norm - (np.abs(x) / b) ** p.alpha)
    return float(out) if out.ndim == 0 else out


def ggd_logpdf(x, p: GgdParams):
    b = ggd_beta(p)
    log_norm = math.log(p.alpha) - math.log(2.0 * b) - log_gamma(1.0 / p.alpha)
    return log_norm - (np.abs(np.asarray(x, dtype=np.float64)) / b) ** p.alpha


def ggd_sample(p: GgdParams, n: int, seed: int = 0) -> np.ndarray:
    """Draw ``n`` samples as ``sign * beta * G**(1/alpha)``, ``G ~ Gamma(1/alpha)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = stream(seed, "ggd-sample")
    g = rng.gamma(1.0 / p.alpha, 1.0, size=n)
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    return sign * ggd_beta(p) * g ** (1.0 / p.alpha)


def _log_ratio(alpha):
    return 2.0 * log_gamma(2.0 / alpha) - log_gamma(1.0 / alpha) - log_gamma(3.0 / alpha)


def ggd_ratio(alpha: float) -> float:
    """Moment ratio ``(E|x|)^2 / E[x^2] = Gamma(2/a)^2 / (Gamma(1/a) Gamma(3/a))``."""
    if not (ALPHA_MIN <= alpha <= ALPHA_MAX):
        raise ValueError(f"alpha must lie in [{ALPHA_MIN}, {ALPHA_MAX}], got {alpha}")
    return math.exp(_log_ratio(alpha))


def ggd_ratio_dalpha(alpha: float) -> float:
    """Derivative of :func:`ggd_ratio` with respect to alpha."""
    a2 = alpha * alpha
    dlog = (-4.0 * special.digamma(2.0 / alpha) + special.digamma(1.0 / alpha)
            + 3.0 * special.digamma(3.0 / alpha)) / a2
    return ggd_ratio(alpha) * dlog


RATIO_LO = math.exp(_log_ratio(ALPHA_MIN))
RATIO_HI = math.exp(_log_ratio(ALPHA_MAX))


def _solve_alpha(target: float, tol: float = 1e-12) -> tuple:
    if target <= RATIO_LO:
        return ALPHA_MIN, True
    if target >= RATIO_HI:
        return ALPHA_MAX, True
    lo, hi = ALPHA_MIN, ALPHA_MAX
    log_target = math.log(target)
    while hi - lo > tol * max(1.0, lo):
        mid = 0.5 * (lo + hi)
        if _log_ratio(mid) < log_target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), False


def _moments(samples):
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 16:
        raise ValueError(f"ggd_fit needs at least 16 samples, got {x.size}")
    m1 = float(np.mean(np.abs(x)))
    m2 = float(np.mean(x * x))
    if np.var(x) <= 1e-12 or m2 <= 0:
        raise DegenerateInputError("samples are (near) constant")
    return x, m1, m2


def ggd_fit(samples) -> GgdParams:
    """Moment-matching fit.

    ``sigma = sqrt(mean(x^2))`` and ``alpha`` solves
    ``ggd_ratio(alpha) = mean(|x|)^2 / mean(x^2)`` by bisection on
    [0.05, 20]. Ratios outside that range are clamped to the bound and the
    result is flagged with ``clamped=True``.
    """
    _, m1, m2 = _moments(samples)
    alpha, clamped = _solve_alpha(m1 * m1 / m2)
    return GgdParams(alpha, math.sqrt(m2), clamped)


def ggd_fit_with_grad(samples):
    """Fit plus the gradients of (alpha, sigma) with respect to each sample.

    ``d alpha / dx`` follows from implicit differentiation of the moment
    equation; it is zero when the fit is clamped.
    """
    x, m1, m2 = _moments(samples)
    n = x.size
    alpha, clamped = _solve_alpha(m1 * m1 / m2)
    sigma = math.sqrt(m2)
    dsigma = x / (n * sigma)
    if clamped:
        dalpha = np.zeros_like(x)
    else:
        # r = m1^2 / m2;  dr/dx = 2 m1 sign(x) / (n m2) - 2 m1^2 x / (n m2^2)
        dr = (2.0 * m1 / (n * m2)) * np.sign(x) - (2.0 * m1 * m1 / (n * m2 * m2)) * x
        dalpha = dr / ggd_ratio_dalpha(alpha)
    return GgdParams(alpha, sigma, clamped), dalpha, dsigma


def _kld_terms(a1, s1, a2, s2):
    lb1 = math.log(s1) + _log_beta_ratio(a1)
    lb2 = math.log(s2) + _log_beta_ratio(a2)
    expo = math.exp(a2 * (lb1 - lb2) + log_gamma((a2 + 1.0) / a1) - log_gamma(1.0 / a1))
    log_part = (math.log(a1) - math.log(a2) + lb2 - lb1
                + log_gamma(1.0 / a2) - log_gamma(1.0 / a1))
    return log_part, expo


def ggd_kld(p1: GgdParams, p2: GgdParams, variant: str = "corrected") -> float:
    """Closed-form KL(p1 || p2) between two zero-mean GGDs.

    ``as_printed`` is the two-term expression without the ``-1/alpha1``
    constant; ``corrected`` includes it, so identical arguments give zero.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown KLD variant {variant!r}")
    log_part, expo = _kld_terms(p1.alpha, p1.sigma, p2.alpha, p2.sigma)
    val = log_part + expo
    if variant == "corrected":
        val -= 1.0 / p1.alpha
    return val


def ggd_kld_grad(p1: GgdParams, p2: GgdParams, variant: str = "corrected") -> tuple:
    """Partial derivatives of :func:`ggd_kld` with respect to (alpha1, sigma1)."""
    a1, s1, a2 = p1.alpha, p1.sigma, p2.alpha
    _, expo = _kld_terms(a1, s1, a2, p2.sigma)
    a1sq = a1 * a1
    psi1 = special.digamma(1.0 / a1)
    dlb1 = 0.5 * (-psi1 + 3.0 * special.digamma(3.0 / a1)) / a1sq
    dlg1 = -psi1 / a1sq
    dlg21 = -(a2 + 1.0) / a1sq * special.digamma((a2 + 1.0) / a1)
    d_alpha = 1.0 / a1 - dlb1 - dlg1 + expo * (a2 * dlb1 + dlg21 - dlg1)
    if variant == "corrected":
        d_alpha += 1.0 / a1sq
    d_sigma = (-1.0 + expo * a2) / s1
    return float(d_alpha), float(d_sigma)
