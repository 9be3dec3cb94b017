"""No-reference quality scoring and the refine/terminate controller."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .diffusion import DiffusionSchedule
from .ggd import DegenerateInputError, ggd_fit
from .imgproc import Image, mscn_plane, to_gray
from .latentcodec import LatentTensor
from .rng import stream

FEATURE_VERSION = "mscn-ggd-2scale-lum-grad/1"
COV_REG = 1e-6
FEATURE_NAMES = ("alpha_s1", "sigma_s1", "alpha_s2", "sigma_s2", "mean_lum", "mean_grad")


class Decision(str, Enum):
    GREAT = "Great"
    REFINE = "Refine"


def _half(gray: np.ndarray) -> np.ndarray:
    h, w = (gray.shape[0] // 2) * 2, (gray.shape[1] // 2) * 2
    g = gray[:h, :w]
    return 0.25 * (g[0::2, 0::2] + g[1::2, 0::2] + g[0::2, 1::2] + g[1::2, 1::2])


def _mscn_params(gray: np.ndarray) -> tuple:
    try:
        p = ggd_fit(mscn_plane(gray))
    except DegenerateInputError:
        return 0.0, 0.0
    return p.alpha, p.sigma


def quality_features(img: Image) -> np.ndarray:
    """6-D feature: MSCN GGD (alpha, sigma) at full and half scale, mean
    luminance and mean gradient magnitude."""
    gray = to_gray(img)
    a1, s1 = _mscn_params(gray)
    a2, s2 = _mscn_params(_half(gray))
    gy, gx = np.gradient(gray)
    return np.array([a1, s1, a2, s2, gray.mean(), np.hypot(gx, gy).mean()])


@dataclass(frozen=True, eq=False)
class QualityModel:
    mean: np.ndarray
    cov: np.ndarray
    version: str = FEATURE_VERSION

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=np.float64)
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        chol = np.linalg.cholesky(cov)  # raises if not positive definite
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    def to_json(self) -> str:
        return json.dumps({"version": self.version, "mean": self.mean.tolist(),
                           "covariance": self.cov.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "QualityModel":
        d = json.loads(text)
        return cls(np.array(d["mean"]), np.array(d["covariance"]), d.get("version", FEATURE_VERSION))


def fit_pristine_model(corpus: Sequence[Image]) -> QualityModel:
    """Mean and regularised covariance of quality features over clean images."""
    if len(corpus) < 10:
        raise ValueError(f"need at least 10 images, got {len(corpus)}")
    F = np.stack([quality_features(im) for im in corpus])
    cov = np.cov(F, rowvar=False)
    if np.all(np.abs(cov) < 1e-12):
        raise ValueError("degenerate features: zero covariance across the corpus")
    return QualityModel(F.mean(axis=0), cov + COV_REG * np.eye(F.shape[1]))


def quality_score(img: Image, model: QualityModel) -> float:
    """Negated Mahalanobis distance to the pristine model (higher is better)."""
    d = quality_features(img) - model.mean
    y = np.linalg.solve(model._chol, d)
    return -float(math.sqrt(y @ y))


def dqr_decide(s_j: float, s_prev: Optional[float], eta: float = 0.01) -> Decision:
    """Great when the score improved by less than ``eta``; Refine otherwise.

    The first check (no previous score) always refines.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if s_prev is None:
        return Decision.REFINE
    return Decision.GREAT if s_j - s_prev < eta else Decision.REFINE


def renoise(z, t_prime: int, sched: DiffusionSchedule, seed: int = 0, index: int = 0):
    """``sqrt(ab) z + sqrt(1 - ab) xi`` with ``ab = alpha_bar[t_prime]``."""
    if not (0 < t_prime <= sched.T):
        raise ValueError(f"t_prime {t_prime} outside (0, {sched.T}]")
    arr = z.coeffs if isinstance(z, LatentTensor) else np.asarray(z, dtype=np.float64)
    a = sched.alpha_bars[t_prime]
    xi = stream(seed, "renoise", index).standard_normal(arr.shape)
    out = math.sqrt(a) * arr + math.sqrt(1.0 - a) * xi
    return z.replace(out) if isinstance(z, LatentTensor) else out
