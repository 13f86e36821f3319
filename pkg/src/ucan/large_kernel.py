"""Large Kernel Distillation: channel split plus triple feature extraction
(hierarchical large-kernel, local bottleneck and channel branches)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import instrument
from .errors import ConfigError, DimensionError
from .tensor import DTYPE, concat_channels, conv2d, gelu, global_avg_pool, linear, split_channels


@dataclass(frozen=True)
class LkdConfig:
    k_core: int = 5
    dilation: int = 2
    k_extra: int | None = None
    reduction: int = 4
    channels: int = 32

    def __post_init__(self):
        for name, k in (("k_core", self.k_core), ("k_extra", self.k_extra)):
            if k is not None and (k < 1 or k % 2 == 0):
                raise ConfigError(f"{name} must be a positive odd int, got {k}")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")
        if self.reduction < 1:
            raise ConfigError(f"reduction must be >= 1, got {self.reduction}")

    @property
    def fine_channels(self) -> int:
        """C_fg = max(C/4, 16), never more than C."""
        return min(max(self.channels // 4, 16), self.channels)

    @property
    def large(self) -> bool:
        return self.k_extra is not None

    def stages(self):
        """(kernel, dilation) of each separable stage of the large-kernel branch."""
        out = [(self.k_core, 1), (self.k_core, self.dilation)]
        if self.large:
            out.append((self.k_extra, self.dilation))
        return out


# the six configurations tabulated for the large-kernel branch, with their ERF
ERF_TABLE = [
    ((3, 1, None), 5),
    ((5, 1, None), 9),
    ((5, 2, None), 13),
    ((5, 3, 11), 47),
    ((5, 3, 13), 53),
    ((5, 3, 17), 65),
]


def predict_erf(cfg: LkdConfig) -> int:
    """1D receptive field of the large-kernel stack: each stage adds (k-1)*d."""
    erf = cfg.k_core + (cfg.k_core - 1) * cfg.dilation
    if cfg.large:
        erf += (cfg.k_extra - 1) * cfg.dilation
    return erf


def init_hlk_weights(cfg: LkdConfig, channels: int, rng=None, fill=None, noise: float = 0.1) -> dict:
    """Depthwise 1xk / kx1 kernels per stage.

    Random init is a centre tap of 1 plus Gaussian noise of std ``noise/sqrt(k)``
    so the six-conv stack starts near identity; ``fill`` sets every tap to a
    constant instead.
    """
    w = {}
    for i, (k, _) in enumerate(cfg.stages()):
        for key, shape in (("h", (channels, 1, 1, k)), ("v", (channels, 1, k, 1))):
            if fill is not None:
                w[f"hlk.{i}.{key}"] = np.full(shape, fill, DTYPE)
            else:
                kern = noise / math.sqrt(k) * rng.standard_normal(shape)
                kern.reshape(channels, k)[:, k // 2] += 1.0
                w[f"hlk.{i}.{key}"] = kern.astype(DTYPE)
    return w


def separable(x, wh, wv, dilation: int = 1):
    """1xk depthwise then kx1 depthwise, both with the given dilation."""
    c = x.shape[1]
    y = conv2d(x, wh, dilation=(1, dilation), groups=c)
    return conv2d(y, wv, dilation=(dilation, 1), groups=c)


def hlk_branch(x, cfg: LkdConfig, weights: dict):
    c = x.shape[1]
    if weights["hlk.0.h"].shape[0] != c:
        raise DimensionError(f"large-kernel weights are for {weights['hlk.0.h'].shape[0]} channels, input has {c}")
    y = x
    for i, (_, d) in enumerate(cfg.stages()):
        y = separable(y, weights[f"hlk.{i}.h"], weights[f"hlk.{i}.v"], d)
    return y


def local_branch(x, r: int, weights: dict):
    """1x1 (C -> C/r), GELU, 3x3, GELU, 1x1 (C/r -> C)."""
    c = x.shape[1]
    if r < 1 or c % r:
        raise ConfigError(f"reduction {r} does not divide {c} channels")
    y = gelu(conv2d(x, weights["lc.w1"], weights.get("lc.b1")))
    y = gelu(conv2d(y, weights["lc.w2"], weights.get("lc.b2")))
    return conv2d(y, weights["lc.w3"], weights.get("lc.b3"))


def channel_branch(x, weights: dict):
    """Per-channel weights from a linear map of globally pooled features, (n, c, 1, 1)."""
    pooled = global_avg_pool(x)
    return linear(pooled, weights["cb.w"], weights.get("cb.b")).astype(DTYPE)[:, :, None, None]


def init_lkd_weights(cfg: LkdConfig, rng: np.random.Generator) -> dict:
    c = cfg.fine_channels
    if c % cfg.reduction:
        raise ConfigError(f"reduction {cfg.reduction} does not divide {c} fine channels")
    cr = c // cfg.reduction

    def kaiming(shape, gain=1.0):
        fan_in = int(np.prod(shape[1:]))
        return (gain * rng.standard_normal(shape) / math.sqrt(fan_in)).astype(DTYPE)

    # damped output conv and near-constant channel weights keep the
    # multiplicative fusion from compounding across stacked layers at init

    w = init_hlk_weights(cfg, c, rng)
    w.update({
        "lc.w1": kaiming((cr, c, 1, 1)), "lc.b1": np.zeros(cr, DTYPE),
        "lc.w2": kaiming((cr, cr, 3, 3)), "lc.b2": np.zeros(cr, DTYPE),
        "lc.w3": kaiming((c, cr, 1, 1), 0.1), "lc.b3": np.zeros(c, DTYPE),
        "cb.w": kaiming((c, c), 0.02), "cb.b": np.ones(c, DTYPE),
    })
    return w


def tfe(x, cfg: LkdConfig, weights: dict):
    """Triple feature extraction: channel weights times (local + large-kernel)."""
    with instrument.scope("tfe"):
        xc = channel_branch(x, weights)
        spatial = local_branch(x, cfg.reduction, weights).astype(np.float64) + hlk_branch(x, cfg, weights)
        instrument.elementwise(2 * spatial.size)
        return (xc * spatial).astype(DTYPE)


def lkd_forward(x, cfg: LkdConfig, weights: dict):
    """Route the first C_fg channels through TFE; pass the rest through untouched."""
    x = np.asarray(x, dtype=DTYPE)
    c = x.shape[1]
    if c < 16:
        raise ConfigError(f"large kernel distillation needs >= 16 channels, got {c}")
    if c != cfg.channels:
        raise ConfigError(f"config is for {cfg.channels} channels, input has {c}")
    cfg_fg = cfg.fine_channels
    with instrument.scope("lkd"):
        fine, coarse = split_channels(x, [cfg_fg, c - cfg_fg])
        return concat_channels([tfe(fine, cfg, weights), coarse])
