"""Orthonormal block-DCT codec used as the latent space.

Each channel is tiled into ``block x block`` tiles and every tile is replaced
by its orthonormal 2-D DCT-II, so latents stay pixel-aligned: the DC
coefficient of a tile sits at the tile's top-left position. The transform
is linear and exactly invertible, and it preserves energy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import fft

from .ggd import GgdParams, ggd_fit, ggd_fit_with_grad
from .imgproc import Image

BLOCK = 8


@dataclass(frozen=True, eq=False)
class LatentTensor:
    """Block-DCT coefficients of an image.

    ``coeffs`` has the (possibly reflect-padded) shape ``(Hp, Wp, C)``;
    ``orig_shape`` is the shape of the source image.
    """

    coeffs: np.ndarray
    block: int = BLOCK
    orig_shape: tuple = None
    colorspace: str = None  # inferred from the channel count when omitted

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.ndim == 2:
            c = c[:, :, None]
        if c.shape[0] % self.block or c.shape[1] % self.block:
            raise ValueError(f"latent shape {c.shape} is not a multiple of block {self.block}")
        object.__setattr__(self, "coeffs", c)
        if self.colorspace is None:
            object.__setattr__(self, "colorspace", "GRAY" if c.shape[2] == 1 else "RGB")
        if self.orig_shape is None:
            object.__setattr__(self, "orig_shape", c.shape)
        else:
            object.__setattr__(self, "orig_shape", tuple(self.orig_shape))

    @property
    def shape(self) -> tuple:
        return self.coeffs.shape

    def replace(self, coeffs: np.ndarray) -> "LatentTensor":
        return LatentTensor(coeffs, self.block, self.orig_shape, self.colorspace)

    def __add__(self, other):
        return self.replace(self.coeffs + _coeffs(other))

    def __sub__(self, other):
        return self.replace(self.coeffs - _coeffs(other))

    def __mul__(self, k):
        return self.replace(self.coeffs * k)

    __rmul__ = __mul__


def _coeffs(z):
    return z.coeffs if isinstance(z, LatentTensor) else np.asarray(z)


def _to_blocks(x: np.ndarray, b: int) -> np.ndarray:
    h, w, c = x.shape
    return x.reshape(h // b, b, w // b, b, c)


def _from_blocks(blocks: np.ndarray) -> np.ndarray:
    hb, b, wb, _, c = blocks.shape
    return blocks.reshape(hb * b, wb * b, c)


def dct_blocks(x: np.ndarray, block: int = BLOCK) -> np.ndarray:
    """Forward block DCT on an array whose sides are multiples of ``block``."""
    return _from_blocks(fft.dctn(_to_blocks(x, block), type=2, norm="ortho", axes=(1, 3)))


def idct_blocks(z: np.ndarray, block: int = BLOCK) -> np.ndarray:
    return _from_blocks(fft.idctn(_to_blocks(z, block), type=2, norm="ortho", axes=(1, 3)))


def _pad_amount(n: int, b: int) -> int:
    return (-n) % b


def encode_array(x: np.ndarray, block: int = BLOCK) -> np.ndarray:
    ph, pw = _pad_amount(x.shape[0], block), _pad_amount(x.shape[1], block)
    if ph or pw:
        x = np.pad(x, ((0, ph), (0, pw), (0, 0)), mode="reflect" if min(x.shape[:2]) > 1 else "edge")
    return dct_blocks(x, block)


def decode_array(z: np.ndarray, orig_shape=None, block: int = BLOCK) -> np.ndarray:
    """Inverse transform without clamping (raw values for gradient paths)."""
    x = idct_blocks(z, block)
    if orig_shape is not None:
        x = x[:orig_shape[0], :orig_shape[1]]
    return x


def encode(img: Image, block: int = BLOCK) -> LatentTensor:
    return LatentTensor(encode_array(img.data, block), block, img.shape, img.colorspace)


def decode(z: LatentTensor) -> Image:
    """Materialise a latent as an Image (values clamped to [0, 1])."""
    return Image(decode_array(z.coeffs, z.orig_shape, z.block), z.colorspace)


def dc_mask(shape, block: int = BLOCK) -> np.ndarray:
    """Boolean mask of DC positions for a latent of ``shape``."""
    h, w = shape[:2]
    m = np.zeros(shape[:2], dtype=bool)
    m[::block, ::block] = True
    return np.broadcast_to(m[:, :, None], (h, w) + tuple(shape[2:])) if len(shape) == 3 else m


def stats_mask(z: LatentTensor, exclude_dc: bool = True) -> np.ndarray:
    """Coefficients used for statistics: whole blocks inside the unpadded region."""
    h, w = z.orig_shape[:2]
    b = z.block
    mask = np.zeros(z.shape, dtype=bool)
    mask[:(h // b) * b, :(w // b) * b] = True
    if exclude_dc:
        mask &= ~dc_mask(z.shape, b)
    return mask


def latent_stats(z: LatentTensor, exclude_dc: bool = True,
                 per_channel: bool = False):
    """GGD fit over latent coefficients, pooled across channels by default.

    With ``per_channel=True`` a list with one fit per channel is returned.
    """
    mask = stats_mask(z, exclude_dc)
    if per_channel:
        return [_fit_selected(z.coeffs[:, :, c][mask[:, :, c]]) for c in range(z.shape[2])]
    return _fit_selected(z.coeffs[mask])


def _fit_selected(values: np.ndarray) -> GgdParams:
    if values.size < 64:
        raise ValueError(f"latent_stats needs >= 64 coefficients, got {values.size}")
    return ggd_fit(values)


def latent_stats_with_grad(coeffs: np.ndarray, mask: np.ndarray):
    """Pooled fit plus gradients of (alpha, sigma) as full latent-shaped arrays."""
    values = coeffs[mask]
    if values.size < 64:
        raise ValueError(f"latent_stats needs >= 64 coefficients, got {values.size}")
    p, da, ds = ggd_fit_with_grad(values)
    ga = np.zeros_like(coeffs)
    gs = np.zeros_like(coeffs)
    ga[mask] = da
    gs[mask] = ds
    return p, ga, gs


def save_latent(z: LatentTensor, path) -> None:
    """Flat little-endian float32 dump with an (h, w, c, block) int32 header."""
    h, w, c = z.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4i", h, w, c, z.block))
        fh.write(z.coeffs.astype("<f4").tobytes())


def load_latent(path) -> LatentTensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    h, w, c, block = struct.unpack_from("<4i", buf)
    data = np.frombuffer(buf, dtype="<f4", offset=16)
    if data.size != h * w * c:
        raise ValueError(f"latent payload holds {data.size} values, expected {h * w * c}")
    return LatentTensor(data.reshape(h, w, c).astype(np.float64), block)
