"""Image container, PPM I/O, colour conversion and full-reference metrics."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

COLORSPACES = ("RGB", "HSV", "GRAY")
LUMA = np.array([0.299, 0.587, 0.114])
PSNR_CAP = 100.0


class PpmError(ValueError):
    """Base class for PPM/PGM decoding failures."""


class MalformedHeaderError(PpmError):
    pass


class TruncatedPayloadError(PpmError):
    pass


class UnsupportedFormatError(PpmError):
    pass


class ColorspaceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Image:
    """H x W x C float image with values in [0, 1].

    ``data`` is copied, clamped and made read-only at construction, so an
    Image can be shared freely. NaN input is rejected rather than clamped.
    """

    data: np.ndarray
    colorspace: str = "RGB"

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"expected H x W x {{1,3}} data, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must have positive height and width")
        if np.isnan(arr).any():
            raise ValueError("image data contains NaN")
        if self.colorspace not in COLORSPACES:
            raise ColorspaceError(f"unknown colorspace {self.colorspace!r}")
        if (self.colorspace == "GRAY") != (arr.shape[2] == 1):
            raise ColorspaceError(
                f"{self.colorspace} image cannot have {arr.shape[2]} channel(s)")
        np.clip(arr, 0.0, 1.0, out=arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.colorspace == other.colorspace and np.array_equal(self.data, other.data)

    __hash__ = None


def gray_image(data) -> Image:
    return Image(np.asarray(data, dtype=np.float64), "GRAY")


# --------------------------------------------------------------------------
# PPM / PGM

def _read_header(buf: bytes):
    """Parse magic, width, height and maxval; return them and the payload offset."""
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise MalformedHeaderError("header ends before magic/width/height/maxval")
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
        if len(tokens) == 1 and tokens[0] not in (b"P5", b"P6"):
            if tokens[0][:1] == b"P" and len(tokens[0]) == 2 and tokens[0][1:].isdigit():
                raise UnsupportedFormatError(f"unsupported magic number {tokens[0]!r}")
            raise MalformedHeaderError(f"not a PNM file (magic {tokens[0][:8]!r})")
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise MalformedHeaderError("missing whitespace after maxval")
    pos += 1
    magic = tokens[0].decode()
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise MalformedHeaderError(f"non-integer header fields {tokens[1:]!r}") from None
    if width <= 0 or height <= 0:
        raise MalformedHeaderError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormatError(f"only 8-bit maxval 255 is supported, got {maxval}")
    return magic, width, height, pos


def decode_ppm(buf: bytes) -> Image:
    magic, width, height, offset = _read_header(buf)
    channels = 3 if magic == "P6" else 1
    need = width * height * channels
    payload = buf[offset:offset + need]
    if len(payload) < need:
        raise TruncatedPayloadError(f"expected {need} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return Image(arr / 255.0, "RGB" if channels == 3 else "GRAY")


def encode_ppm(img: Image) -> bytes:
    if img.colorspace == "HSV":
        raise ColorspaceError("convert HSV images to RGB before saving")
    magic = "P6" if img.channels == 3 else "P5"
    q = np.rint(img.data * 255.0).astype(np.uint8)
    header = f"{magic}\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + q.tobytes()


def load_image(path) -> Image:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def save_image(img: Image, path) -> None:
    data = encode_ppm(img)
    with open(path, "wb") as fh:
        fh.write(data)


# --------------------------------------------------------------------------
# colour

def rgb_to_hsv(img: Image) -> Image:
    """RGB -> HSV with H scaled to [0, 1)."""
    if img.colorspace != "RGB":
        raise ColorspaceError(f"rgb_to_hsv expects RGB, got {img.colorspace}")
    return Image(_rgb_to_hsv(img.data), "HSV")


def hsv_to_rgb(img: Image) -> Image:
    if img.colorspace != "HSV":
        raise ColorspaceError(f"hsv_to_rgb expects HSV, got {img.colorspace}")
    return Image(_hsv_to_rgb(img.data), "RGB")


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    s = np.divide(c, v, out=np.zeros_like(v), where=v > 0)
    safe_c = np.where(c > 0, c, 1.0)
    h = np.where(v == r, np.mod((g - b) / safe_c, 6.0),
                 np.where(v == g, (b - r) / safe_c + 2.0, (r - g) / safe_c + 4.0))
    h = np.where(c > 0, h / 6.0, 0.0)
    h = np.mod(h, 1.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = np.mod(h, 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    return np.stack([r, g, b], axis=-1)


def to_gray(img: Image) -> np.ndarray:
    """Luminance plane (H x W) using 0.299/0.587/0.114 weights."""
    if img.channels == 1:
        return img.data[:, :, 0]
    if img.colorspace == "HSV":
        img = hsv_to_rgb(img)
    return img.data @ LUMA


# --------------------------------------------------------------------------
# metrics

def _check_same(a: Image, b: Image):
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def psnr(a: Image, b: Image, cap: float = PSNR_CAP) -> float:
    """PSNR in dB for unit peak; identical images report ``cap``."""
    _check_same(a, b)
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * math.log10(1.0 / mse), cap)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D plane with 1-D window ``w``."""
    k = len(w)
    rows = sliding_window_view(x, k, axis=0) @ w
    return sliding_window_view(rows, k, axis=1) @ w


def ssim(a: Image, b: Image, win: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows, averaged over channels.

    Uses the original constants (K1=0.01, K2=0.03, L=1) and population
    (window-weighted) moments.
    """
    _check_same(a, b)
    if a.height < win or a.width < win:
        raise ValueError(f"image {a.height}x{a.width} smaller than {win}x{win} window")
    c1, c2 = k1 ** 2, k2 ** 2
    w = gaussian_window(win, sigma)
    vals = []
    for c in range(a.channels):
        x, y = a.data[:, :, c], b.data[:, :, c]
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        sxx = _filter_valid(x * x, w) - mx * mx
        syy = _filter_valid(y * y, w) - my * my
        sxy = _filter_valid(x * y, w) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# statistics

MSCN_SIGMA = 7.0 / 6.0
MSCN_C = 1e-3


def mscn(img: Image) -> np.ndarray:
    """Mean-subtracted contrast-normalised coefficients of the luminance plane.

    Local moments use a 7x7 Gaussian window (sigma 7/6, reflect borders).
    """
    gray = to_gray(img)
    return mscn_plane(gray)


def mscn_plane(gray: np.ndarray) -> np.ndarray:
    truncate = 3.0 / MSCN_SIGMA
    gray = gray - gray.flat[0]  # offset-free; keeps constant planes exactly zero
    mu = ndimage.gaussian_filter(gray, MSCN_SIGMA, mode="reflect", truncate=truncate)
    mu2 = ndimage.gaussian_filter(gray * gray, MSCN_SIGMA, mode="reflect", truncate=truncate)
    sd = np.sqrt(np.abs(mu2 - mu * mu))
    return (gray - mu) / (sd + MSCN_C)


def channel_means(img: Image) -> np.ndarray:
    return img.data.mean(axis=(0, 1))


@dataclass(frozen=True, eq=False)
class Histogram:
    bin_edges: np.ndarray
    densities: np.ndarray = field(repr=False)

    def mass(self) -> float:
        return float(np.sum(self.densities * np.diff(self.bin_edges)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["bin_lo", "bin_hi", "density"])
            for lo, hi, d in zip(self.bin_edges[:-1], self.bin_edges[1:], self.densities):
                wr.writerow([repr(float(lo)), repr(float(hi)), repr(float(d))])


def pixel_histogram(img: Image, bins: int = 64) -> Histogram:
    if bins < 2:
        raise ValueError("bins must be >= 2")
    dens, edges = np.histogram(img.data, bins=bins, range=(0.0, 1.0), density=True)
    return Histogram(edges, dens)


def list_images(directory) -> list:
    """Sorted PPM/PGM file names in ``directory``."""
    return sorted(f for f in os.listdir(directory)
                  if f.lower().endswith((".ppm", ".pgm", ".pnm")))

