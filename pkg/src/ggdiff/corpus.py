"""Deterministic synthetic image corpus (gradients, checkerboards, blobs,
band-limited textures)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imgproc import Image
from .rng import stream

PATTERNS = ("gradient", "checker", "blobs", "texture")


@dataclass(frozen=True)
class CorpusSpec:
    count: int = 10
    size: int = 32
    patterns: tuple = PATTERNS
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.size < 8:
            raise ValueError("size must be >= 8")
        bad = set(self.patterns) - set(PATTERNS)
        if bad or not self.patterns:
            raise ValueError(f"unknown patterns {sorted(bad)}")
        object.__setattr__(self, "patterns", tuple(self.patterns))


def _grid(n):
    y, x = np.mgrid[0:n, 0:n] / max(n - 1, 1)
    return y, x


def _gradient(n, rng):
    y, x = _grid(n)
    th = rng.uniform(0, 2 * np.pi)
    base = np.cos(th) * x + np.sin(th) * y
    base = (base - base.min()) / (np.ptp(base) + 1e-12)
    return base + 0.15 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * (x + y))


def _checker(n, rng):
    y, x = _grid(n)
    k = rng.integers(2, 6)
    sq = ((np.floor(x * k * 0.999) + np.floor(y * k * 0.999)) % 2).astype(float)
    return ndimage.gaussian_filter(sq, rng.uniform(0.5, 1.5), mode="reflect")


def _blobs(n, rng):
    y, x = _grid(n)
    out = np.zeros((n, n))
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, 1, 2)
        s = rng.uniform(0.08, 0.25)
        out += rng.uniform(0.3, 1.0) * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
    return out


def _texture(n, rng):
    noise = rng.standard_normal((n, n))
    return ndimage.gaussian_filter(noise, rng.uniform(1.0, 3.0), mode="wrap")


_MAKERS = {"gradient": _gradient, "checker": _checker, "blobs": _blobs, "texture": _texture}


def _normalise(p, lo, hi):
    p = (p - p.min()) / (np.ptp(p) + 1e-12)
    return lo + (hi - lo) * p


def make_image(spec: CorpusSpec, index: int) -> Image:
    """Image ``index`` of the corpus; depends only on (spec, index)."""
    rng = stream(spec.seed, "corpus", index)
    kind = spec.patterns[index % len(spec.patterns)]
    plane = _normalise(_MAKERS[kind](spec.size, rng), 0.0, 1.0)
    tint = rng.uniform(0.5, 1.0, 3)
    offset = rng.uniform(0.05, 0.25, 3)
    rgb = offset + (0.9 - offset) * tint * plane[:, :, None]
    # a little independent structure per channel keeps colours from being rank-1
    rgb += 0.05 * ndimage.gaussian_filter(rng.standard_normal(rgb.shape), (2, 2, 0), mode="wrap")
    return Image(np.clip(rgb, 0.0, 1.0))


def make_corpus(spec: CorpusSpec) -> list:
    return [make_image(spec, i) for i in range(spec.count)]


def image_name(index: int) -> str:
    return f"img_{index:04d}.ppm"
