"""Dense (n, c, h, w) float32 tensors and the primitive ops everything else composes.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in row-major
(n, c, h, w) order. Reductions accumulate in float64 and the result is cast
back to float32. Token-matrix views (n, h*w, c) are explicit copies made by
:func:`to_tokens` / :func:`from_tokens`.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from . import instrument
from .errors import ConfigError, DimensionError

DTYPE = np.float32
EPS = 1e-6


def rng(seed: int) -> np.random.Generator:
    """Seeded generator; PCG64 streams are identical across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_tensor(x, allow_nonfinite=False) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise DimensionError(f"expected a rank-4 (n, c, h, w) tensor, got shape {x.shape}")
    if min(x.shape) < 1:
        raise DimensionError(f"all dimensions must be >= 1, got {x.shape}")
    if not allow_nonfinite and not np.all(np.isfinite(x)):
        raise ValueError("tensor contains non-finite values")
    return x


def to_tokens(x: np.ndarray) -> np.ndarray:
    """(n, c, h, w) -> (n, h*w, c)."""
    n, c, h, w = x.shape
    return np.ascontiguousarray(x.reshape(n, c, h * w).transpose(0, 2, 1))


def from_tokens(t: np.ndarray, h: int, w: int) -> np.ndarray:
    """(n, h*w, c) -> (n, c, h, w)."""
    n, hw, c = t.shape
    if hw != h * w:
        raise DimensionError(f"{hw} tokens cannot form a {h}x{w} image")
    return np.ascontiguousarray(t.transpose(0, 2, 1).reshape(n, c, h, w))


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x, weight, bias=None, stride=1, dilation=(1, 1), groups=1, padding="same"):
    """Grouped, dilated 2D cross-correlation with zero padding.

    ``weight`` has shape (c_out, c_in/groups, kh, kw). ``padding="same"`` pads
    ``(k-1)*d/2`` on each side, so stride 1 preserves the spatial size; an
    explicit int or pair may be given instead.
    """
    x = np.asarray(x)
    weight = np.asarray(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"groups={groups} must divide c_in={cin} and c_out={cout}")
    if cin_g != cin // groups:
        raise DimensionError(f"weight expects {cin_g * groups} input channels, input has {cin}")
    dh, dw = _pair(dilation)
    sh, sw = _pair(stride)
    if padding == "same":
        if ((kh - 1) * dh) % 2 or ((kw - 1) * dw) % 2:
            raise ConfigError(f"same padding needs odd kernel extents, got {kh}x{kw}")
        ph, pw = (kh - 1) * dh // 2, (kw - 1) * dw // 2
    else:
        ph, pw = _pair(padding)
    hout = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wout = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    if hout < 1 or wout < 1:
        raise DimensionError(f"input {h}x{w} too small for a {kh}x{kw} kernel")

    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    xg = xp.reshape(n, groups, cin_g, h + 2 * ph, w + 2 * pw)
    cout_g = cout // groups
    wg = weight.astype(np.float64).reshape(groups, cout_g, cin_g, kh, kw)
    out = np.zeros((n, groups, cout_g, hout, wout))
    depthwise = cin_g == 1 and cout_g == 1
    for i in range(kh):
        r0 = i * dh
        for j in range(kw):
            c0 = j * dw
            patch = xg[:, :, :, r0 : r0 + sh * (hout - 1) + 1 : sh, c0 : c0 + sw * (wout - 1) + 1 : sw]
            if depthwise:
                out += patch * wg[None, :, 0, 0, i, j, None, None, None]
            else:
                out += np.einsum("gki,ngihw->ngkhw", wg[:, :, :, i, j], patch)
    out = out.reshape(n, cout, hout, wout)
    instrument.conv(n * cout * cin_g * kh * kw * hout * wout)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(1, cout, 1, 1)
        instrument.elementwise(out.size)
    return out.astype(DTYPE)


def softmax_lastdim(x):
    """Numerically stable softmax over the last axis (float64 internally)."""
    x = np.asarray(x)
    z = x.astype(np.float64)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    z /= z.sum(axis=-1, keepdims=True)
    instrument.elementwise(3 * z.size)
    return z.astype(np.result_type(x.dtype, DTYPE))


def pixel_shuffle(x, r: int):
    x = np.asarray(x)
    n, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise ConfigError(f"channels {c} not divisible by r^2 = {r * r}")
    co = c // (r * r)
    return np.ascontiguousarray(
        x.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)
    )


def pixel_unshuffle(x, r: int):
    x = np.asarray(x)
    n, c, h, w = x.shape
    if r < 1 or h % r or w % r:
        raise ConfigError(f"spatial size {h}x{w} not divisible by r={r}")
    return np.ascontiguousarray(
        x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)
    )


def layer_norm(x, gamma, beta, eps: float = EPS):
    """Normalise over the channel axis independently for every spatial token."""
    x = np.asarray(x)
    z = x.astype(np.float64)
    mu = z.mean(axis=1, keepdims=True)
    var = ((z - mu) ** 2).mean(axis=1, keepdims=True)
    z = (z - mu) / np.sqrt(var + eps)
    c = x.shape[1]
    z = z * np.asarray(gamma, np.float64).reshape(1, c, 1, 1) + np.asarray(beta, np.float64).reshape(1, c, 1, 1)
    instrument.elementwise(4 * z.size)
    return z.astype(DTYPE)


def window_partition(x, ws: int):
    """(n, c, h, w) -> (n * h/ws * w/ws, c, ws, ws), windows in row-major order."""
    x = np.asarray(x)
    n, c, h, w = x.shape
    if ws < 1 or h % ws or w % ws:
        raise DimensionError(f"{h}x{w} is not divisible by window {ws}; pad first")
    nh, nw = h // ws, w // ws
    return np.ascontiguousarray(
        x.reshape(n, c, nh, ws, nw, ws).transpose(0, 2, 4, 1, 3, 5).reshape(n * nh * nw, c, ws, ws)
    )


def window_merge(windows, n: int, h: int, w: int):
    windows = np.asarray(windows)
    b, c, ws, _ = windows.shape
    nh, nw = h // ws, w // ws
    if nh * ws != h or nw * ws != w or b != n * nh * nw:
        raise DimensionError(f"{b} windows of size {ws} cannot tile {n}x{h}x{w}")
    return np.ascontiguousarray(
        windows.reshape(n, nh, nw, c, ws, ws).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, h, w)
    )


def pad_to_multiple(x, m: int):
    """Zero-pad the bottom/right so both spatial dims are multiples of ``m``."""
    n, c, h, w = x.shape
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))


def gelu(x):
    x = np.asarray(x)
    z = x.astype(np.float64)
    instrument.elementwise(z.size)
    return (0.5 * z * (1.0 + erf(z / np.sqrt(2.0)))).astype(np.result_type(x.dtype, DTYPE))


def sigmoid(x):
    x = np.asarray(x)
    z = x.astype(np.float64)
    instrument.elementwise(z.size)
    return (0.5 * (1.0 + np.tanh(0.5 * z))).astype(np.result_type(x.dtype, DTYPE))


def add(a, b):
    out = np.add(a, b)
    instrument.elementwise(out.size)
    return out


def mul(a, b):
    out = np.multiply(a, b)
    instrument.elementwise(out.size)
    return out


def split_channels(x, sizes):
    """Split along the channel axis into consecutive chunks of the given sizes."""
    if sum(sizes) != x.shape[1]:
        raise DimensionError(f"split sizes {sizes} do not sum to {x.shape[1]} channels")
    return np.split(x, np.cumsum(sizes)[:-1], axis=1)


def concat_channels(parts):
    parts = [p for p in parts if p.shape[1] > 0]
    return np.concatenate(parts, axis=1)


def matmul(a, b):
    """Batched matrix product with float64 accumulation and MAC accounting."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
    instrument.matmul(a.shape[-2], a.shape[-1], b.shape[-1], batch)
    return out.astype(np.result_type(a.dtype, b.dtype, DTYPE))


def transpose(a):
    return np.swapaxes(a, -1, -2)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis; ``weight`` is (in, out)."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, np.asarray(bias, out.dtype))
    return out


def global_avg_pool(x):
    """(n, c, h, w) -> (n, c)."""
    instrument.elementwise(x.size)
    return x.astype(np.float64).mean(axis=(2, 3)).astype(DTYPE)


def max_pool2d(x, k: int, stride: int):
    n, c, h, w = x.shape
    k = min(k, h, w)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    instrument.elementwise(win.size)
    return np.ascontiguousarray(win.max(axis=(-1, -2)))


def bilinear_resize(x, size):
    """Bilinear resampling with half-pixel centres (``align_corners=False``)."""
    n, c, h, w = x.shape
    oh, ow = size

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_weights(h, oh)
    x0, x1, fx = axis_weights(w, ow)
    z = x.astype(np.float64)
    rows = z[:, :, y0, :] * (1 - fy)[:, None] + z[:, :, y1, :] * fy[:, None]
    out = rows[:, :, :, x0] * (1 - fx) + rows[:, :, :, x1] * fx
    instrument.elementwise(4 * out.size)
    return out.astype(DTYPE)


def relu(x):
    instrument.elementwise(np.size(x))
    return np.maximum(x, 0)
