"""Attention engines: naive softmax, linear attention (quadratic and linear-time
paths), tiled exact attention with an online softmax, and windowed multi-head
self-attention.

Matrix-level engines accept (..., N, d) arrays; leading axes are batch axes.
Internally everything runs in float64; results come back in the input's
floating dtype (at least float32).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import instrument
from .errors import ConfigError, DimensionError
from .feature_maps import FeatureMap, apply_feature_map
from .tensor import EPS, from_tokens, linear, pad_to_multiple, to_tokens, window_merge, window_partition


@dataclass(frozen=True)
class AttentionConfig:
    heads: int
    head_dim: int
    window: int | None = None

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigError(f"heads and head_dim must be >= 1, got {self.heads}, {self.head_dim}")
        if self.window is not None and self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")

    @property
    def channels(self) -> int:
        return self.heads * self.head_dim

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)

    @classmethod
    def for_channels(cls, channels: int, heads: int, window=None):
        if channels % heads:
            raise ConfigError(f"{channels} channels not divisible by {heads} heads")
        return cls(heads, channels // heads, window)


@dataclass(frozen=True)
class TileConfig:
    tile_rows: int = 64
    tile_cols: int = 64

    def __post_init__(self):
        if self.tile_rows < 1 or self.tile_cols < 1:
            raise ConfigError(f"tile sizes must be >= 1, got {self.tile_rows}x{self.tile_cols}")


def _check_qkv(Q, K, V):
    Q, K, V = (np.asarray(a) for a in (Q, K, V))
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2] or Q.shape[:-2] != K.shape[:-2]:
        raise DimensionError(f"incompatible Q {Q.shape}, K {K.shape}, V {V.shape}")
    if Q.shape[-2] < 1:
        raise DimensionError("need at least one query")
    dtype = np.result_type(Q.dtype, K.dtype, V.dtype, np.float32)
    return Q.astype(np.float64), K.astype(np.float64), V.astype(np.float64), dtype


def _batch(shape):
    return int(np.prod(shape[:-2], dtype=np.int64)) if len(shape) > 2 else 1


def softmax_attention(Q, K, V, scale: float = 1.0, return_weights: bool = False):
    """Naive attention: materialises the full (N, N) weight matrix."""
    Q, K, V, dtype = _check_qkv(Q, K, V)
    n, d = Q.shape[-2:]
    m, dv = V.shape[-2:]
    b = _batch(Q.shape)
    instrument.alloc(Q.shape[:-1] + (m,))
    S = np.matmul(Q, np.swapaxes(K, -1, -2)) * scale
    instrument.matmul(n, d, m, b)
    S = np.exp(S - S.max(axis=-1, keepdims=True))
    S /= S.sum(axis=-1, keepdims=True)
    instrument.elementwise(4 * S.size)
    out = np.matmul(S, V)
    instrument.matmul(n, m, dv, b)
    instrument.release(Q.shape[:-1] + (m,))
    if return_weights:
        return out.astype(dtype), S.astype(dtype)
    return out.astype(dtype)


def _guard(den, eps):
    small = np.abs(den) < eps
    hits = int(small.sum())
    if hits:
        instrument.guard(hits)
        den = den + eps
    return den


def linear_attention_quadratic(Q, K, V, fmap: FeatureMap, eps: float = EPS, return_weights: bool = False):
    """Linear attention evaluated by materialising ``phi(Q) phi(K)^T`` (N x N)."""
    Q, K, V, dtype = _check_qkv(Q, K, V)
    fq = apply_feature_map(fmap, Q).astype(np.float64)
    fk = apply_feature_map(fmap, K).astype(np.float64)
    n, r = fq.shape[-2:]
    m, dv = V.shape[-2:]
    b = _batch(Q.shape)
    instrument.alloc(Q.shape[:-1] + (m,))
    A = np.matmul(fq, np.swapaxes(fk, -1, -2))
    instrument.matmul(n, r, m, b)
    den = _guard(A.sum(axis=-1, keepdims=True), eps)
    instrument.elementwise(A.size)
    out = np.matmul(A, V) / den
    instrument.matmul(n, m, dv, b)
    instrument.elementwise(n * dv * b)
    instrument.release(Q.shape[:-1] + (m,))
    if return_weights:
        return out.astype(dtype), (A / den).astype(dtype)
    return out.astype(dtype)


def linear_attention_linear(Q, K, V, fmap: FeatureMap, eps: float = EPS, normalize: bool = True):
    """Linear-time linear attention.

    Key-side aggregates ``S = sum_j phi(k_j) v_j^T`` (r x d) and
    ``z = sum_j phi(k_j)`` are formed once and reused for every query, so no
    (N, N) buffer ever exists. ``normalize=False`` drops the division by
    ``phi(q).z``.
    """
    Q, K, V, dtype = _check_qkv(Q, K, V)
    fq = apply_feature_map(fmap, Q)
    fk = apply_feature_map(fmap, K)
    return linear_attention_from_features(fq, fk, V, eps, normalize).astype(dtype)


def linear_attention_from_features(fq, fk, V, eps: float = EPS, normalize: bool = True):
    """Linear-time aggregation given precomputed ``phi(Q)`` and ``phi(K)``; float64 out."""
    fq = np.asarray(fq, dtype=np.float64)
    fk = np.asarray(fk, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    n, r = fq.shape[-2:]
    m, dv = V.shape[-2:]
    if fk.shape[-1] != r or fk.shape[-2] != m:
        raise DimensionError(f"features {fq.shape}/{fk.shape} do not fit values {V.shape}")
    b = _batch(fq.shape)
    with instrument.temp(fk.shape[:-2] + (r, dv)):
        S = np.matmul(np.swapaxes(fk, -1, -2), V)
        instrument.matmul(r, m, dv, b)
        out = np.matmul(fq, S)
        instrument.matmul(n, r, dv, b)
    if normalize:
        z = fk.sum(axis=-2)
        instrument.elementwise(fk.size)
        den = np.einsum("...nr,...r->...n", fq, z)[..., None]
        instrument.norm(b * n * r)
        out = out / _guard(den, eps)
        instrument.elementwise(out.size)
    return out


def tiled_exact_attention(Q, K, V, scale: float = 1.0, tiles: TileConfig = TileConfig()):
    """Exact softmax attention computed tile by tile with an online softmax.

    For each query tile a running row max ``m``, running denominator ``l`` and
    unnormalised accumulator are updated as key tiles stream past; the score
    matrix never exists beyond one (tile_rows, tile_cols) block.
    """
    Q, K, V, dtype = _check_qkv(Q, K, V)
    lead = Q.shape[:-2]
    n, d = Q.shape[-2:]
    m, dv = V.shape[-2:]
    b = _batch(Q.shape)
    out = np.empty(lead + (n, dv))
    for r0 in range(0, n, tiles.tile_rows):
        q = Q[..., r0 : r0 + tiles.tile_rows, :]
        tr = q.shape[-2]
        instrument.alloc(lead + (tr, dv))
        acc = np.zeros(lead + (tr, dv))
        row_max = np.full(lead + (tr, 1), -np.inf)
        row_sum = np.zeros(lead + (tr, 1))
        for c0 in range(0, m, tiles.tile_cols):
            k = K[..., c0 : c0 + tiles.tile_cols, :]
            v = V[..., c0 : c0 + tiles.tile_cols, :]
            tc = k.shape[-2]
            with instrument.temp(lead + (tr, tc)):
                s = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
                instrument.matmul(tr, d, tc, b)
                new_max = np.maximum(row_max, s.max(axis=-1, keepdims=True))
                correction = np.exp(row_max - new_max)
                p = np.exp(s - new_max)
                row_sum = row_sum * correction + p.sum(axis=-1, keepdims=True)
                acc = acc * correction + np.matmul(p, v)
                instrument.matmul(tr, tc, dv, b)
                instrument.elementwise(4 * p.size + acc.size)
                row_max = new_max
        out[..., r0 : r0 + tr, :] = acc / row_sum
        instrument.release(lead + (tr, dv))
    return out.astype(dtype)


def split_heads(t, heads):
    """(B, T, C) -> (B, heads, T, C/heads)."""
    B, T, C = t.shape
    return t.reshape(B, T, heads, C // heads).transpose(0, 2, 1, 3)


def merge_heads(t):
    B, D, T, hd = t.shape
    return t.transpose(0, 2, 1, 3).reshape(B, T, D * hd)


def _windows(x, ws):
    n, c, h, w = x.shape
    xp = pad_to_multiple(x, ws)
    win = window_partition(xp, ws)
    return to_tokens(win), xp.shape


def _unwindows(tokens, ws, padded_shape, h, w):
    n, c, hp, wp = padded_shape
    win = from_tokens(tokens, ws, ws)
    return np.ascontiguousarray(window_merge(win, n, hp, wp)[:, :, :h, :w])


def windowed_mhsa(x, cfg: AttentionConfig, weights: dict, return_maps: bool = False,
                  tiles: TileConfig | None = None):
    """Non-shifted window multi-head self-attention on an (n, C, h, w) tensor.

    ``weights`` holds ``qkv_w`` (C, 3C), ``qkv_b`` (3C), ``proj_w`` (C, C) and
    ``proj_b`` (C). Inputs not divisible by the window are zero-padded and the
    result cropped. With ``tiles`` set, the tiled exact engine is used and no
    maps can be returned. Maps have shape (windows, heads, ws*ws, ws*ws).
    """
    n, c, h, w = x.shape
    if cfg.window is None:
        raise ConfigError("windowed attention needs cfg.window")
    if c != cfg.channels:
        raise ConfigError(f"input has {c} channels, config expects {cfg.heads} x {cfg.head_dim}")
    ws = cfg.window
    tokens, padded = _windows(x, ws)
    qkv = linear(tokens, weights["qkv_w"], weights.get("qkv_b"))
    q, k, v = (split_heads(t, cfg.heads) for t in np.split(qkv, 3, axis=-1))
    maps = None
    if tiles is not None:
        if return_maps:
            raise ConfigError("the tiled engine never materialises attention maps")
        o = tiled_exact_attention(q, k, v, cfg.scale, tiles)
    else:
        o, maps = softmax_attention(q, k, v, cfg.scale, return_weights=True)
    o = linear(merge_heads(o), weights["proj_w"], weights.get("proj_b"))
    y = _unwindows(o.astype(np.float32), ws, padded, h, w)
    if return_maps:
        return y, maps.astype(np.float32)
    return y


def windowed_mhsa_received(x, cfg: AttentionConfig, weights: dict, maps):
    """Window attention that reuses attention maps computed elsewhere.

    Only the value projection (``v_w``, ``v_b``) and output projection run; the
    query/key path is skipped entirely.
    """
    n, c, h, w = x.shape
    ws = cfg.window
    tokens, padded = _windows(x, ws)
    v = split_heads(linear(tokens, weights["v_w"], weights.get("v_b")), cfg.heads)
    maps = np.asarray(maps)
    if maps.shape != v.shape[:2] + (v.shape[2], v.shape[2]):
        raise DimensionError(f"shared maps {maps.shape} do not fit values {v.shape}")
    o = np.matmul(maps.astype(np.float64), v.astype(np.float64))
    instrument.matmul(v.shape[2], v.shape[2], v.shape[3], v.shape[0] * v.shape[1])
    o = linear(merge_heads(o), weights["proj_w"], weights.get("proj_b"))
    return _unwindows(o.astype(np.float32), ws, padded, h, w)
