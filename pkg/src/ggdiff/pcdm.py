"""Conditioned degradation operator with hand-derived gradients.

    phi(x) = f3( a(f2(a(f1(x)))) + l(alpha, sigma) * a(f1(x)) )

``f1..f3`` are 3x3 convolutions (stride 1, reflect padding), ``a`` is a
leaky rectifier with slope 0.1 and ``l`` is an affine map from the GGD
parameters to per-channel scales. Images are handled as raw ``(H, W, C)``
arrays here; nothing is clamped, so gradients stay exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .ggd import GgdParams
from .imgproc import Image
from .rng import stream

WIDTH = 16
SLOPE = 0.1
PARAM_NAMES = ("f1_w", "f1_b", "f2_w", "f2_b", "f3_w", "f3_b", "l_w", "l_b")
ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8
MOMENT_EPS = 1e-8
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T
SCALES = 3


@dataclass(frozen=True, eq=False)
class PcdmWeights:
    """Operator parameters plus the Adam moments carried between steps."""

    params: dict
    adam_m: dict = field(default=None, repr=False)
    adam_v: dict = field(default=None, repr=False)
    step: int = 0

    def __post_init__(self):
        missing = set(PARAM_NAMES) - set(self.params)
        if missing:
            raise ValueError(f"missing PCDM parameters {sorted(missing)}")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(self.params[name])):
                raise ValueError(f"parameter {name} is not finite")
        if self.adam_m is None:
            object.__setattr__(self, "adam_m", {k: np.zeros_like(v) for k, v in self.params.items()})
        if self.adam_v is None:
            object.__setattr__(self, "adam_v", {k: np.zeros_like(v) for k, v in self.params.items()})

    @property
    def c_in(self) -> int:
        return self.params["f1_w"].shape[2]

    def __getitem__(self, name):
        return self.params[name]


@dataclass(frozen=True, eq=False)
class PcdmGradients:
    grads: dict

    def __getitem__(self, name):
        return self.grads[name]

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.grads.values())))


def init_weights(c_in: int = 3, seed: int = 0, width: int = WIDTH,
                 out_scale: float = 1e-3, cond_scale: float = 1e-2,
                 identity: bool = True) -> PcdmWeights:
    """Random f1/f2 with a small f3 read-out.

    With ``identity`` the first ``c_in`` hidden channels carry the input
    straight through (f1 and f3 centre taps, unit scale from ``l``), so the
    operator starts close to the identity on non-negative inputs rather
    than close to zero.
    """
    if identity and width < c_in:
        raise ValueError("width must be >= c_in for the identity start")
    rng = stream(seed, "pcdm-init")
    p = {
        "f1_w": rng.standard_normal((3, 3, c_in, width)) * np.sqrt(2.0 / (9 * c_in)),
        "f1_b": np.zeros(width),
        "f2_w": rng.standard_normal((3, 3, width, width)) * np.sqrt(2.0 / (9 * width)),
        "f2_b": np.zeros(width),
        "f3_w": rng.standard_normal((3, 3, width, c_in)) * np.sqrt(2.0 / (9 * width)) * out_scale,
        "f3_b": np.zeros(c_in),
        "l_w": rng.standard_normal((width, 2)) * cond_scale,
        "l_b": np.zeros(width),
    }
    if identity:
        eye = np.eye(c_in)
        p["f1_w"][:, :, :, :c_in] = 0.0
        p["f1_w"][1, 1, :, :c_in] = eye
        p["f2_w"][:, :, :, :c_in] = 0.0
        p["f3_w"][1, 1, :c_in, :] += eye
        p["l_b"][:c_in] = 1.0
    return PcdmWeights(p)


# --------------------------------------------------------------------------
# convolution primitives

def _pad(x):
    return np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="reflect")


def _pad_adjoint(g):
    g = g.copy()
    g[2] += g[0]
    g[-3] += g[-1]
    g[:, 2] += g[:, 0]
    g[:, -3] += g[:, -1]
    return g[1:-1, 1:-1]


def conv3x3(x, w, b):
    h, wd, _ = x.shape
    xp = _pad(x)
    out = np.broadcast_to(b, (h, wd, w.shape[3])).copy()
    for dy in range(3):
        for dx in range(3):
            out += xp[dy:dy + h, dx:dx + wd] @ w[dy, dx]
    return out


def conv3x3_backward(x, w, gout):
    """Gradients of a 3x3 reflect-padded convolution w.r.t. (w, b, x)."""
    h, wd, cin = x.shape
    xp = _pad(x)
    g2 = gout.reshape(-1, gout.shape[2])
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    for dy in range(3):
        for dx in range(3):
            gw[dy, dx] = xp[dy:dy + h, dx:dx + wd].reshape(-1, cin).T @ g2
            gxp[dy:dy + h, dx:dx + wd] += gout @ w[dy, dx].T
    return gw, g2.sum(axis=0), _pad_adjoint(gxp)


def _lrelu(x):
    return np.where(x > 0, x, SLOPE * x)


def _lrelu_grad(x):
    return np.where(x > 0, 1.0, SLOPE)


def _cond_vec(cond) -> np.ndarray:
    if isinstance(cond, GgdParams):
        return np.array([cond.alpha, cond.sigma])
    return np.asarray(cond, dtype=np.float64).reshape(2)


# --------------------------------------------------------------------------
# operator

def forward_array(w: PcdmWeights, x: np.ndarray, cond, keep: bool = False):
    if x.ndim != 3 or x.shape[2] != w.c_in:
        raise ValueError(f"PCDM expects {w.c_in} channels, got input shape {x.shape}")
    c = _cond_vec(cond)
    p = w.params
    a1 = conv3x3(x, p["f1_w"], p["f1_b"])
    h1 = _lrelu(a1)
    a2 = conv3x3(h1, p["f2_w"], p["f2_b"])
    h2 = _lrelu(a2)
    lv = p["l_w"] @ c + p["l_b"]
    m = h2 + lv * h1
    y = conv3x3(m, p["f3_w"], p["f3_b"])
    if keep:
        return y, (x, c, a1, h1, a2, lv, m)
    return y


def backward_array(w: PcdmWeights, cache, gy: np.ndarray):
    """Return (parameter gradients, d/dx, d/dcond) for upstream gradient ``gy``."""
    x, c, a1, h1, a2, lv, m = cache
    p = w.params
    g = {}
    g["f3_w"], g["f3_b"], gm = conv3x3_backward(m, p["f3_w"], gy)
    glv = np.sum(gm * h1, axis=(0, 1))
    g["l_w"] = np.outer(glv, c)
    g["l_b"] = glv
    gcond = p["l_w"].T @ glv
    ga2 = gm * _lrelu_grad(a2)
    g["f2_w"], g["f2_b"], gh1 = conv3x3_backward(h1, p["f2_w"], ga2)
    gh1 = gh1 + gm * lv
    ga1 = gh1 * _lrelu_grad(a1)
    g["f1_w"], g["f1_b"], gx = conv3x3_backward(x, p["f1_w"], ga1)
    return g, gx, gcond


def pcdm_forward(w: PcdmWeights, x0_hat, cond: GgdParams, raw: bool = False):
    """Apply the operator; returns an Image (clamped) unless ``raw`` is set."""
    x = x0_hat.data if isinstance(x0_hat, Image) else np.asarray(x0_hat, dtype=np.float64)
    y = forward_array(w, x, cond)
    if raw:
        return y
    cs = x0_hat.colorspace if isinstance(x0_hat, Image) else ("RGB" if y.shape[2] == 3 else "GRAY")
    return Image(y, cs)


# --------------------------------------------------------------------------
# losses (array level, each returns value and gradient w.r.t. the first argument)

def _arr(a):
    return a.data if isinstance(a, Image) else np.asarray(a, dtype=np.float64)


def _same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse_and_grad(a, b):
    _same(a, b)
    d = a - b
    return float(np.mean(d * d)), 2.0 * d / d.size


def _filter_valid(x, k):
    h, w = x.shape[0] - 2, x.shape[1] - 2
    out = np.zeros((h, w) + x.shape[2:])
    for u in range(3):
        for v in range(3):
            if k[u, v]:
                out += k[u, v] * x[u:u + h, v:v + w]
    return out


def _filter_valid_T(g, k, shape):
    out = np.zeros(shape)
    h, w = g.shape[:2]
    for u in range(3):
        for v in range(3):
            if k[u, v]:
                out[u:u + h, v:v + w] += k[u, v] * g
    return out


def _down2(x):
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _down2_T(g, shape):
    out = np.zeros(shape)
    up = 0.25 * np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)
    out[:up.shape[0], :up.shape[1]] = up
    return out


def perceptual_and_grad(a, b):
    """Sobel-pyramid distance: sum over 3 dyadic scales of the mean squared
    difference of horizontal and vertical Sobel responses."""
    _same(a, b)
    e = a - b
    pyramid = [e]
    for _ in range(SCALES - 1):
        if min(pyramid[-1].shape[:2]) < 6:
            break
        pyramid.append(_down2(pyramid[-1]))
    total = 0.0
    grads = []
    for lev in pyramid:
        g = np.zeros_like(lev)
        if min(lev.shape[:2]) >= 3:
            for k in (SOBEL_X, SOBEL_Y):
                r = _filter_valid(lev, k)
                total += float(np.mean(r * r))
                g += _filter_valid_T(2.0 * r / r.size, k, lev.shape)
        grads.append(g)
    for i in range(len(pyramid) - 1, 0, -1):
        grads[i - 1] += _down2_T(grads[i], pyramid[i - 1].shape)
    return total, grads[0]


def _moments(a):
    n = a.shape[0] * a.shape[1]
    mu = a.mean(axis=(0, 1))
    d = a - mu
    m2 = (d * d).mean(axis=(0, 1))
    m3 = (d * d * d).mean(axis=(0, 1))
    s = np.sqrt(m2 + MOMENT_EPS)
    return n, mu, d, m2, m3, s


def moment_and_grad(a, b):
    """Per-channel squared differences of mean, std and skewness, summed."""
    _same(a, b)
    n, mu_a, d, m2, m3, s_a = _moments(a)
    _, mu_b, _, _, m3_b, s_b = _moments(b)
    sk_a, sk_b = m3 / s_a ** 3, m3_b / s_b ** 3
    dm, ds, dk = mu_a - mu_b, s_a - s_b, sk_a - sk_b
    val = float(np.sum(dm * dm + ds * ds + dk * dk))
    g_mu = np.full(a.shape, 1.0 / n)
    g_s = d / (n * s_a)
    g_m3 = 3.0 * (d * d - m2) / n
    g_sk = g_m3 / s_a ** 3 - 3.0 * m3 / s_a ** 4 * g_s
    grad = 2.0 * (dm * g_mu + ds * g_s + dk * g_sk)
    return val, grad


def perceptual_distance(a, b) -> float:
    return perceptual_and_grad(_arr(a), _arr(b))[0]


def moment_match_penalty(a, b) -> float:
    return moment_and_grad(_arr(a), _arr(b))[0]


# --------------------------------------------------------------------------
# training

TARGETS = ("xlq", "x0hat")


def pcdm_loss(w: PcdmWeights, x0_hat, x_lq, cond, target: str = "xlq"):
    """Mixed loss and its gradients.

    ``target="xlq"`` fits every term to the observation; ``"x0hat"`` fits
    the MSE and Sobel terms to the input estimate and only the moment term
    to the observation.
    """
    if target not in TARGETS:
        raise ValueError(f"unknown PCDM target {target!r}")
    x, y_obs = _arr(x0_hat), _arr(x_lq)
    _same(x, y_obs)
    y, cache = forward_array(w, x, cond, keep=True)
    recon = y_obs if target == "xlq" else x
    l1, g1 = mse_and_grad(y, recon)
    l2, g2 = perceptual_and_grad(y, recon)
    l3, g3 = moment_and_grad(y, y_obs)
    grads, _, _ = backward_array(w, cache, g1 + g2 + g3)
    return l1 + l2 + l3, PcdmGradients(grads)


def adam_update(w: PcdmWeights, grads: PcdmGradients, lr: float) -> PcdmWeights:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    step = w.step + 1
    params, ms, vs = {}, {}, {}
    c1 = 1.0 - ADAM_B1 ** step
    c2 = 1.0 - ADAM_B2 ** step
    for k in PARAM_NAMES:
        g = grads[k]
        m = ADAM_B1 * w.adam_m[k] + (1.0 - ADAM_B1) * g
        v = ADAM_B2 * w.adam_v[k] + (1.0 - ADAM_B2) * g * g
        params[k] = w.params[k] - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        ms[k], vs[k] = m, v
    return PcdmWeights(params, ms, vs, step)


def pcdm_train_step(w: PcdmWeights, x0_hat, x_lq, cond, lr: float = 1e-3,
                    target: str = "xlq") -> PcdmWeights:
    """One Adam step on :func:`pcdm_loss`."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if lr == 0:
        return w
    _, grads = pcdm_loss(w, x0_hat, x_lq, cond, target)
    return adam_update(w, grads, lr)


def with_params(w: PcdmWeights, **updates) -> PcdmWeights:
    params = dict(w.params)
    params.update({k: np.asarray(v, dtype=np.float64) for k, v in updates.items()})
    return replace(w, params=params, adam_m=None, adam_v=None, step=0)


# --------------------------------------------------------------------------
# serialisation

_MAGIC = b"PCDMW1\n"


def save_weights(w: PcdmWeights, path) -> None:
    """Flat binary: magic, step, then per array (name, ndim, dims, float64 data)."""
    entries = [(k, w.params[k]) for k in PARAM_NAMES]
    entries += [("m." + k, w.adam_m[k]) for k in PARAM_NAMES]
    entries += [("v." + k, w.adam_v[k]) for k in PARAM_NAMES]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qI", w.step, len(entries)))
        for name, arr in entries:
            nb = name.encode("ascii")
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path) -> PcdmWeights:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(_MAGIC):
        raise ValueError("not a PCDM weight file")
    pos = len(_MAGIC)
    step, count = struct.unpack_from("<qI", buf, pos)
    pos += 12
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + ln].decode("ascii")
        pos += ln
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    params = {k: arrays[k] for k in PARAM_NAMES}
    m = {k: arrays["m." + k] for k in PARAM_NAMES}
    v = {k: arrays["v." + k] for k in PARAM_NAMES}
    return PcdmWeights(params, m, v, step)
