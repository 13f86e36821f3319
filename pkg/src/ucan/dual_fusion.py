"""Dual Fusion Layer: half-width Q/K/V, a Hedgehog linear-attention spatial
branch and a transposed (channel-mixing) attention branch, concatenated and
projected back to C channels.

Width conventions: the layer maps C input channels to Q, K, V of width C/2
(the *branch width*). The spatial branch splits the branch width into ``heads``
slices, each with its own Hedgehog map; the channel branch is single-headed.
:func:`dfl_mac_count` is expressed in terms of the branch width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import instrument
from .attention import AttentionConfig, linear_attention_from_features, merge_heads, split_heads
from .errors import ConfigError, ContractError
from .feature_maps import FeatureMap, HedgehogParams, apply_feature_map
from .tensor import DTYPE, concat_channels, conv2d, from_tokens, linear, matmul, softmax_lastdim, to_tokens


@dataclass(eq=False)
class DflWeights:
    wq: np.ndarray | None  # (C, C/2); receivers reuse shared Q/K and may omit these
    wk: np.ndarray | None
    wv: np.ndarray
    wd: np.ndarray  # (C/2, 1, 3, 3) depthwise
    hedgehog: list  # one HedgehogParams per head, dim C/(2D)
    proj_w: np.ndarray  # (C, C)
    proj_b: np.ndarray  # (C,)

    @property
    def channels(self) -> int:
        return self.wv.shape[0]

    @property
    def branch_width(self) -> int:
        return self.wv.shape[1]

    @classmethod
    def init(cls, channels: int, heads: int, rng: np.random.Generator, m: int = 1, qk: bool = True):
        if channels % 2:
            raise ConfigError(f"dual fusion needs an even channel count, got {channels}")
        half = channels // 2
        if half % heads:
            raise ConfigError(f"branch width {half} not divisible by {heads} heads")

        def dense(i, o):
            return (rng.standard_normal((i, o)) / math.sqrt(i)).astype(DTYPE)

        return cls(
            wq=dense(channels, half) if qk else None,
            wk=dense(channels, half) if qk else None,
            wv=dense(channels, half),
            wd=(rng.standard_normal((half, 1, 3, 3)) / 3.0).astype(DTYPE),
            hedgehog=[HedgehogParams.init(half // heads, m, rng) for _ in range(heads)],
            proj_w=dense(channels, channels),
            proj_b=np.zeros(channels, DTYPE),
        )

    def to_dict(self, prefix: str = "") -> dict:
        out = {f"{prefix}{k}": getattr(self, k) for k in ("wq", "wk", "wv", "wd", "proj_w", "proj_b")
               if getattr(self, k) is not None}
        for i, p in enumerate(self.hedgehog):
            out[f"{prefix}hh.{i}.W"] = p.W
            out[f"{prefix}hh.{i}.b"] = p.b
        return out

    @classmethod
    def from_dict(cls, params: dict, prefix: str = ""):
        heads = 0
        while f"{prefix}hh.{heads}.W" in params:
            heads += 1
        return cls(
            **{k: params.get(f"{prefix}{k}") for k in ("wq", "wk", "wv", "wd", "proj_w", "proj_b")},
            hedgehog=[HedgehogParams(params[f"{prefix}hh.{i}.W"], params[f"{prefix}hh.{i}.b"]) for i in range(heads)],
        )


@dataclass(frozen=True, eq=False)
class AttentionShare:
    """Attention components handed from a sharing module to its receiver.

    ``A_map`` are the window-attention maps, (windows, heads, ws^2, ws^2).
    ``A_qk`` holds the DFL's Q and K projection outputs, (n, HW, C/2) each; the
    receiver re-applies its own feature maps to them. ``phi_q``, ``phi_k`` and
    ``channel_attn`` are the sharer's derived quantities, consumed only in
    full-sharing mode. ``shape`` is the (n, C, h, w) the share was built for.
    """

    shape: tuple
    A_qk: dict = field(default_factory=dict)
    A_map: np.ndarray | None = None
    phi_q: np.ndarray | None = None
    phi_k: np.ndarray | None = None
    channel_attn: np.ndarray | None = None

    def check(self, shape, need_map: bool = False):
        if tuple(shape) != tuple(self.shape):
            raise ContractError(f"share recorded for shape {self.shape}, received {tuple(shape)}")
        if need_map and self.A_map is None:
            raise ContractError("share carries no attention maps")


def channel_attention(Q, K, V, return_attn: bool = False):
    """Transposed attention along the channel axis.

    ``A = softmax_rows(Q^T K / sqrt(N))`` is a (c, c) row-stochastic matrix and
    the output is ``V A^T``: every output channel is a convex combination of
    the input channels at the same token.
    """
    Q, K, V = (np.asarray(a) for a in (Q, K, V))
    n_tok = Q.shape[-2]
    logits = matmul(np.swapaxes(Q, -1, -2), K) / math.sqrt(n_tok)
    instrument.elementwise(logits.size)
    A = softmax_lastdim(logits.astype(np.float64))
    out = apply_channel_attention(A, V)
    return (out, A) if return_attn else out


def apply_channel_attention(A, V):
    return matmul(np.asarray(V, dtype=np.float64), np.swapaxes(A, -1, -2))


def fourier_features(h: int, w: int, c: int) -> np.ndarray:
    """Fixed sinusoidal 2D position code, (h*w, c): first half rows, second half columns."""
    half = max(c // 2, 1)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pos = [ys.reshape(-1), xs.reshape(-1)]
    out = np.zeros((h * w, c))
    for ch in range(c):
        axis = 0 if ch < half else 1
        k = (ch % half) // 2
        freq = 1.0 / (10000.0 ** (2 * k / half))
        out[:, ch] = np.sin(pos[axis] * freq) if ch % 2 == 0 else np.cos(pos[axis] * freq)
    return out


def _spatial_features(q, k, w: DflWeights, heads: int):
    """Per-head Hedgehog features of Q and K, each (n, heads, HW, 2m*hd)."""
    qh, kh = split_heads(q, heads), split_heads(k, heads)
    fq, fk = [], []
    for i, p in enumerate(w.hedgehog):
        fmap = FeatureMap("hedgehog", p)
        fq.append(apply_feature_map(fmap, qh[:, i]))
        fk.append(apply_feature_map(fmap, kh[:, i]))
    return np.stack(fq, axis=1), np.stack(fk, axis=1)


def _spatial_branch(fq, fk, v, w: DflWeights, heads: int, hw, normalize: bool):
    h, wd = hw
    vh = split_heads(v, heads)
    att = merge_heads(linear_attention_from_features(fq, fk, vh, normalize=normalize))
    local = to_tokens(conv2d(from_tokens(v.astype(DTYPE), h, wd), w.wd, groups=w.branch_width))
    return att + local


def _project(x, w: DflWeights):
    with instrument.scope("proj"):
        t = to_tokens(x)
        return t, linear(t, w.wv)


def _finish(f_sb, f_cb, w: DflWeights, shape):
    n, c, h, wd = shape
    with instrument.scope("out"):
        fused = concat_channels([from_tokens(f_sb.astype(DTYPE), h, wd), from_tokens(f_cb.astype(DTYPE), h, wd)])
        y = linear(to_tokens(fused), w.proj_w, w.proj_b)
    return from_tokens(y.astype(DTYPE), h, wd)


def _check_input(x, w: DflWeights, heads: int):
    c = x.shape[1]
    if c % 2:
        raise ConfigError(f"dual fusion needs an even channel count, got {c}")
    if c != w.channels:
        raise ConfigError(f"weights are for {w.channels} channels, input has {c}")
    if (c // 2) % heads or len(w.hedgehog) != heads:
        raise ConfigError(f"branch width {c // 2} and {len(w.hedgehog)} Hedgehog maps do not fit {heads} heads")


def dfl_forward_shared(x, w: DflWeights, cfg: AttentionConfig, normalize: bool = True, fourier: bool = False):
    """Full dual fusion forward; returns (output, AttentionShare)."""
    x = np.asarray(x, dtype=DTYPE)
    _check_input(x, w, cfg.heads)
    if w.wq is None or w.wk is None:
        raise ConfigError("a sharing dual fusion layer needs Q and K projections")
    n, c, h, wd = x.shape
    with instrument.scope("dfl"):
        t, v = _project(x, w)
        with instrument.scope("proj"):
            q = linear(t, w.wq)
            k = linear(t, w.wk)
        qa, ka = q, k
        if fourier:
            pe = fourier_features(h, wd, c // 2).astype(q.dtype)
            qa, ka = q + pe, k + pe
            instrument.elementwise(2 * q.size)
        with instrument.scope("spatial"):
            fq, fk = _spatial_features(qa, ka, w, cfg.heads)
            f_sb = _spatial_branch(fq, fk, v, w, cfg.heads, (h, wd), normalize)
        with instrument.scope("channel"):
            f_cb, A_c = channel_attention(q, k, v, return_attn=True)
        y = _finish(f_sb, f_cb, w, x.shape)
    share = AttentionShare(
        shape=x.shape, A_qk={"q": q, "k": k}, phi_q=fq, phi_k=fk, channel_attn=A_c
    )
    return y, share


def dfl_forward_receiver(x, w: DflWeights, share: AttentionShare, cfg: AttentionConfig,
                         normalize: bool = True, fourier: bool = False, full_sharing: bool = False):
    """Dual fusion forward that reuses a sharer's Q/K projections.

    Only V is projected from ``x``. In the default semi-sharing mode the
    receiver's own Hedgehog maps and the channel attention are recomputed
    from the shared Q and K; ``full_sharing`` reuses the sharer's features
    and channel attention as well.
    """
    x = np.asarray(x, dtype=DTYPE)
    _check_input(x, w, cfg.heads)
    share.check(x.shape)
    n, c, h, wd = x.shape
    q, k = share.A_qk.get("q"), share.A_qk.get("k")
    if q is None or k is None or q.shape != (n, h * wd, c // 2) or k.shape != q.shape:
        raise ContractError(f"shared Q/K do not match input {x.shape}")
    with instrument.scope("dfl"):
        _, v = _project(x, w)
        if full_sharing:
            if share.phi_q is None or share.channel_attn is None:
                raise ContractError("full sharing needs the sharer's features and channel attention")
            with instrument.scope("spatial"):
                f_sb = _spatial_branch(share.phi_q, share.phi_k, v, w, cfg.heads, (h, wd), normalize)
            with instrument.scope("channel"):
                f_cb = apply_channel_attention(share.channel_attn, v)
        else:
            qa, ka = q, k
            if fourier:
                pe = fourier_features(h, wd, c // 2).astype(q.dtype)
                qa, ka = q + pe, k + pe
                instrument.elementwise(2 * q.size)
            with instrument.scope("spatial"):
                fq, fk = _spatial_features(qa, ka, w, cfg.heads)
                f_sb = _spatial_branch(fq, fk, v, w, cfg.heads, (h, wd), normalize)
            with instrument.scope("channel"):
                f_cb = channel_attention(q, k, v)
        return _finish(f_sb, f_cb, w, x.shape)


def dfl_mac_count(C: int, H: int, W: int, D: int) -> int:
    """Closed-form MACs of the spatial and channel branches at branch width ``C``.

    ``2 C^2 HW`` for the channel branch plus ``6 HW C^2 / D + 9 HW C`` for the
    Hedgehog spatial branch (one feature pair per head) and its 3x3 depthwise
    convolution. Projections and normalisation denominators are not included.
    """
    if min(C, H, W, D) < 1 or C % D:
        raise ConfigError(f"need positive ints with C divisible by D, got C={C}, D={D}")
    hw = H * W
    return 2 * C * C * hw + 6 * hw * C * C // D + 9 * hw * C


def dfl_branch_macs(report) -> int:
    """Counted matmul + conv MACs inside the DFL's spatial and channel scopes."""
    return sum(
        report.scoped(p) for p in _branch_paths(report)
    )


def _branch_paths(report):
    seen = set()
    for path in report.by_scope:
        parts = path.split("/")
        for i in range(len(parts) - 1):
            if parts[i] == "dfl" and parts[i + 1] in ("spatial", "channel"):
                seen.add("/".join(parts[: i + 2]))
    return sorted(seen)
