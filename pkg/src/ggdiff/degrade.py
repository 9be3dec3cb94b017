"""Synthetic noise, haze and low-light degradations and their compositions."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .imgproc import ColorspaceError, Image, _hsv_to_rgb, _rgb_to_hsv
from .rng import stream

KINDS = ("noise", "haze", "lowlight")

# light/heavy intensity settings; haze gives a beta range that presets sample from
PRESETS = {
    "noise-light": ("noise", 20.0 / 255.0),
    "noise-heavy": ("noise", 50.0 / 255.0),
    "haze-light": ("haze", (0.02, 0.05)),
    "haze-heavy": ("haze", (0.06, 0.09)),
    "lowlight-light": ("lowlight", 0.7),
    "lowlight-heavy": ("lowlight", 0.3),
}

# noise last: it models sensor noise on the already darkened/hazy scene
MIXED_ORDER = {"lowlight": 0, "haze": 1, "noise": 2}


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    noise_sigma: float = 0.0
    haze_beta: float = 0.0
    haze_A: float = 1.0
    lowlight_gamma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if self.kind == "noise" and not (0.0 <= self.noise_sigma <= 1.0):
            raise ValueError(f"noise sigma must lie in [0, 1], got {self.noise_sigma}")
        if self.kind == "haze":
            if self.haze_beta < 0:
                raise ValueError("haze beta must be >= 0")
            if not (0.0 < self.haze_A <= 1.0):
                raise ValueError("atmospheric light A must lie in (0, 1]")
        if self.kind == "lowlight" and not (0.0 < self.lowlight_gamma <= 1.0):
            raise ValueError("low-light gamma must lie in (0, 1]")

    def to_dict(self) -> dict:
        """Config-file form: only the keys meaningful for ``kind``."""
        out = {"kind": self.kind}
        if self.kind == "noise":
            out.update(sigma=self.noise_sigma, seed=self.seed)
        elif self.kind == "haze":
            out.update(beta=self.haze_beta, A=self.haze_A)
        else:
            out.update(gamma=self.lowlight_gamma)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        kind = d["kind"]
        return cls(kind=kind,
                   noise_sigma=float(d.get("sigma", 0.0)),
                   haze_beta=float(d.get("beta", 0.0)),
                   haze_A=float(d.get("A", 1.0)),
                   lowlight_gamma=float(d.get("gamma", 1.0)),
                   seed=int(d.get("seed", 0)))


def noise(sigma: float, seed: int = 0) -> DegradationSpec:
    return DegradationSpec("noise", noise_sigma=sigma, seed=seed)


def haze(beta: float, A: float = 1.0) -> DegradationSpec:
    return DegradationSpec("haze", haze_beta=beta, haze_A=A)


def lowlight(gamma: float) -> DegradationSpec:
    return DegradationSpec("lowlight", lowlight_gamma=gamma)


def preset(name: str, seed: int = 0) -> DegradationSpec:
    """Named intensity setting, e.g. ``"noise-light"`` or ``"haze-heavy"``.

    Haze presets define a beta range; the concrete beta is drawn uniformly
    from it with a stream keyed by ``seed``.
    """
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kind, value = PRESETS[name]
    if kind == "noise":
        return noise(value, seed)
    if kind == "haze":
        lo, hi = value
        return haze(float(stream(seed, "haze-beta").uniform(lo, hi)))
    return lowlight(value)


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def pseudo_depth(height: int, width: int) -> DepthMap:
    """Radial pseudo depth ``sqrt((i-row/2)^2 + (j-col/2)^2) / sqrt(max(row, col))``."""
    if height < 1 or width < 1:
        raise ValueError("depth map needs positive dimensions")
    i = np.arange(height, dtype=np.float64)[:, None]
    j = np.arange(width, dtype=np.float64)[None, :]
    s = np.sqrt(max(height, width))
    d = np.sqrt((i - height / 2.0) ** 2 + (j - width / 2.0) ** 2) / s
    d.flags.writeable = False
    return DepthMap(d)


def add_gaussian_noise(img: Image, sigma: float, seed: int = 0) -> Image:
    """``clip(x + N(0, sigma^2))`` with i.i.d. noise per element."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img
    n = stream(seed, "noise").standard_normal(img.shape)
    return Image(img.data + sigma * n, img.colorspace)


def synthesize_haze(img: Image, beta: float, A: float = 1.0) -> Image:
    """Atmospheric scattering ``x*t + A*(1-t)`` with ``t = exp(-beta*d)``."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if not (0.0 < A <= 1.0):
        raise ValueError("A must lie in (0, 1]")
    t = np.exp(-beta * pseudo_depth(img.height, img.width).values)[:, :, None]
    return Image(img.data * t + A * (1.0 - t), img.colorspace)


def synthesize_lowlight(img: Image, gamma: float) -> Image:
    """Scale the HSV value channel by ``gamma`` (clipped) and convert back."""
    if img.colorspace != "RGB":
        raise ColorspaceError("low-light synthesis needs an RGB image")
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must lie in (0, 1]")
    hsv = _rgb_to_hsv(img.data)
    hsv[..., 2] = np.clip(gamma * hsv[..., 2], 0.0, 1.0)
    return Image(_hsv_to_rgb(hsv), "RGB")


def apply(img: Image, spec: DegradationSpec) -> Image:
    if spec.kind == "noise":
        return add_gaussian_noise(img, spec.noise_sigma, spec.seed)
    if spec.kind == "haze":
        return synthesize_haze(img, spec.haze_beta, spec.haze_A)
    return synthesize_lowlight(img, spec.lowlight_gamma)


def compose(img: Image, specs: Sequence[DegradationSpec]) -> Image:
    """Apply ``specs`` left to right."""
    if not specs:
        raise ValueError("compose needs at least one degradation")
    for spec in specs:
        img = apply(img, spec)
    return img


def mixed_order(specs: Sequence[DegradationSpec]) -> list:
    """Sort specs into the lowlight -> haze -> noise order (stable)."""
    return sorted(specs, key=lambda s: MIXED_ORDER[s.kind])


def with_seed(spec: DegradationSpec, seed: int) -> DegradationSpec:
    d = asdict(spec)
    d["seed"] = int(seed)
    return DegradationSpec(**d)
