"""Block assembly: HPA, SHA/RHA pairs, ESA, sharing/receiving blocks, BERFG
groups and the full super-resolution forward pass.

Weights live in one flat ``dict`` of named float32 arrays; every block reads
its own prefix. :func:`init_weights` builds the dict from a
:class:`~ucan.config.ModelConfig` with a seeded generator.
"""

from __future__ import annotations

import dataclasses
import math
import warnings

import numpy as np

from . import instrument
from .attention import AttentionConfig, windowed_mhsa, windowed_mhsa_received
from .config import ModelConfig
from .dual_fusion import AttentionShare, DflWeights, dfl_forward_receiver, dfl_forward_shared
from .errors import ContractError, DimensionError, WeightFileError
from .large_kernel import init_lkd_weights, lkd_forward
from .tensor import (
    DTYPE, add, bilinear_resize, conv2d, gelu, layer_norm, max_pool2d, mul, pad_to_multiple,
    pixel_shuffle, relu, rng as make_rng, sigmoid,
)
from .tensorio import load_weights, save_weights


def sub(params: dict, prefix: str) -> dict:
    """View of ``params`` restricted to ``prefix`` with the prefix stripped."""
    p = prefix if prefix.endswith(".") else prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


# ---------------------------------------------------------------- init

class _Init:
    def __init__(self, seed):
        self.rng = make_rng(seed)
        self.params = {}

    def conv(self, name, cout, cin, k, groups=1, bias=True):
        fan_in = cin // groups * k * k
        self.params[f"{name}.w"] = (self.rng.standard_normal((cout, cin // groups, k, k)) / math.sqrt(fan_in)).astype(DTYPE)
        if bias:
            self.params[f"{name}.b"] = np.zeros(cout, DTYPE)

    def dense(self, name, cin, cout):
        self.params[f"{name}_w"] = (self.rng.standard_normal((cin, cout)) / math.sqrt(cin)).astype(DTYPE)
        self.params[f"{name}_b"] = np.zeros(cout, DTYPE)

    def norm(self, name, c):
        self.params[f"{name}.g"] = np.ones(c, DTYPE)
        self.params[f"{name}.b"] = np.zeros(c, DTYPE)


def _init_block(ini: _Init, prefix: str, cfg: ModelConfig, sharing: bool):
    C = cfg.channels
    if cfg.use_hpa:
        ini.norm(f"{prefix}.hpa.ln1", C)
        ini.conv(f"{prefix}.hpa.mlp1", C * cfg.mlp_ratio, C, 1)
        ini.conv(f"{prefix}.hpa.mlpdw", C * cfg.mlp_ratio, C * cfg.mlp_ratio, 7, groups=C * cfg.mlp_ratio)
        ini.conv(f"{prefix}.hpa.mlp2", C, C * cfg.mlp_ratio, 1)
        ini.norm(f"{prefix}.hpa.ln2", C)
        ini.dense(f"{prefix}.hpa.attn.qkv", C, 3 * C)
        ini.dense(f"{prefix}.hpa.attn.proj", C, C)
    ini.conv(f"{prefix}.lm.dw", C, C, 3, groups=C)
    ini.conv(f"{prefix}.lm.pw", C, C, 1)
    for a in range(cfg.ha_depth):
        p = f"{prefix}.ha.{a}"
        ini.norm(f"{p}.ln1", C)
        ini.dense(f"{p}.wmsa.qkv" if sharing else f"{p}.wmsa.v", C, 3 * C if sharing else C)
        ini.dense(f"{p}.wmsa.proj", C, C)
        ini.norm(f"{p}.ln2", C)
        dfl = DflWeights.init(C, cfg.heads, ini.rng, cfg.hedgehog_m, qk=sharing)
        ini.params.update(dfl.to_dict(f"{p}.dfl."))
    for i in range(cfg.lkd_depth):
        for k, v in init_lkd_weights(cfg.lkd, ini.rng).items():
            ini.params[f"{prefix}.lkd.{i}.{k}"] = v
    f = max(C // 4, 1)
    ini.conv(f"{prefix}.esa.conv1", f, C, 1)
    ini.conv(f"{prefix}.esa.convf", f, f, 1)
    ini.conv(f"{prefix}.esa.conv2", f, f, 3)
    ini.conv(f"{prefix}.esa.convmax", f, f, 3)
    ini.conv(f"{prefix}.esa.conv3", f, f, 3)
    ini.conv(f"{prefix}.esa.conv3b", f, f, 3)
    ini.conv(f"{prefix}.esa.conv4", C, f, 1)


def init_weights(cfg: ModelConfig) -> dict:
    """Fan-in scaled Gaussian weights drawn from ``cfg.seed``."""
    ini = _Init(cfg.seed)
    C = cfg.channels
    ini.conv("shallow", C, 3, 3)
    for g in range(cfg.groups):
        _init_block(ini, f"g{g}.sb", cfg, sharing=True)
        _init_block(ini, f"g{g}.rb", cfg, sharing=False)
    ini.conv("fuse", C, C, 3)
    ini.conv("recon", 3 * cfg.scale**2, C, 3)
    return ini.params


def expected_shapes(cfg: ModelConfig) -> dict:
    return {k: v.shape for k, v in init_weights(cfg).items()}


def save_model(path, params: dict, cfg: ModelConfig):
    fmaps = {k[: -len(".hh.0.W")] + ".phi": "hedgehog" for k in params if k.endswith(".hh.0.W")}
    save_weights(path, params, cfg.to_dict(), fmaps)


def load_model(path):
    """Load (params, cfg), checking every expected tensor is present with its shape."""
    params, raw_cfg, _ = load_weights(path)
    try:
        cfg = ModelConfig.from_dict(raw_cfg)
    except Exception as exc:
        raise WeightFileError(f"bad model config in weight file: {exc}", field="config") from exc
    for name, shape in expected_shapes(cfg).items():
        if name not in params:
            raise WeightFileError(f"weight file is missing tensor {name}", field=name)
        if params[name].shape != shape:
            raise WeightFileError(f"tensor {name} has shape {params[name].shape}, expected {shape}", field=name)
    return params, cfg


# ---------------------------------------------------------------- blocks

def _ln(x, p, name):
    return layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def _conv(x, p, name, **kw):
    return conv2d(x, p[f"{name}.w"], p.get(f"{name}.b"), **kw)


def conv_mlp(x, p):
    """1x1 expand, depthwise 7x7, GELU, 1x1 project."""
    y = _conv(x, p, "mlp1")
    y = gelu(_conv(y, p, "mlpdw", groups=y.shape[1]))
    return _conv(y, p, "mlp2")


def hpa_forward(x, p: dict, cfg: ModelConfig):
    """ConvMLP then large-window exact attention (tiled engine), each residual."""
    C = x.shape[1]
    with instrument.scope("hpa"):
        y = add(x, conv_mlp(_ln(x, p, "ln1"), p))
        acfg = AttentionConfig.for_channels(C, cfg.heads, cfg.hpa_window)
        attn = windowed_mhsa(_ln(y, p, "ln2"), acfg, sub(p, "attn"), tiles=cfg.tiles)
        return add(y, attn)


def local_module(x, p: dict):
    with instrument.scope("lm"):
        y = _conv(x, p, "dw", groups=x.shape[1])
        return add(x, gelu(_conv(y, p, "pw")))


def esa_forward(x, p: dict):
    """Enhanced spatial attention: a sigmoid gate built at reduced resolution."""
    n, c, h, w = x.shape
    with instrument.scope("esa"):
        c1_ = _conv(x, p, "conv1")
        c1 = _conv(c1_, p, "conv2", stride=2, padding=0)
        v_max = max_pool2d(c1, 7, 3)
        v_range = relu(_conv(v_max, p, "convmax"))
        c3 = relu(_conv(v_range, p, "conv3"))
        c3 = _conv(c3, p, "conv3b")
        c3 = bilinear_resize(c3, (h, w))
        cf = _conv(c1_, p, "convf")
        gate = sigmoid(_conv(add(c3, cf), p, "conv4"))
        return mul(x, gate)


def _dfl_cfg(cfg: ModelConfig):
    return AttentionConfig.for_channels(cfg.channels // 2, cfg.heads)


def sha_forward(x, p: dict, cfg: ModelConfig):
    """Shared hybrid attention: window attention then a sharing dual fusion layer."""
    wcfg = AttentionConfig.for_channels(x.shape[1], cfg.heads, cfg.wmsa_window)
    y, maps = windowed_mhsa(_ln(x, p, "ln1"), wcfg, sub(p, "wmsa"), return_maps=True)
    y = add(x, y)
    f, share = dfl_forward_shared(
        _ln(y, p, "ln2"), DflWeights.from_dict(p, "dfl."), _dfl_cfg(cfg), cfg.dfl_normalize, cfg.fourier
    )
    return add(y, f), dataclasses.replace(share, A_map=maps)


def rha_forward(x, p: dict, cfg: ModelConfig, share: AttentionShare):
    """Received hybrid attention: reuses the paired module's maps and Q/K."""
    share.check(x.shape, need_map=True)
    wcfg = AttentionConfig.for_channels(x.shape[1], cfg.heads, cfg.wmsa_window)
    try:
        y = windowed_mhsa_received(_ln(x, p, "ln1"), wcfg, sub(p, "wmsa"), share.A_map)
    except DimensionError as exc:
        raise ContractError(str(exc)) from exc
    y = add(x, y)
    f = dfl_forward_receiver(
        _ln(y, p, "ln2"), DflWeights.from_dict(p, "dfl."), share, _dfl_cfg(cfg),
        cfg.dfl_normalize, cfg.fourier, full_sharing=cfg.sharing == "full",
    )
    return add(y, f)


def _tail(x, y, p, cfg):
    for i in range(cfg.lkd_depth):
        y = lkd_forward(y, cfg.lkd, sub(p, f"lkd.{i}"))
    return esa_forward(add(y, x), sub(p, "esa"))


def _head(x, p, cfg):
    y = hpa_forward(x, sub(p, "hpa"), cfg) if cfg.use_hpa else x
    return local_module(y, sub(p, "lm"))


def sharing_block(x, p: dict, cfg: ModelConfig, residual: bool = True):
    """HPA, LM, SHA x depth, LKD x depth, residual, ESA; returns (out, shares)."""
    with instrument.scope("sb"):
        y = _head(x, p, cfg)
        shares = []
        for a in range(cfg.ha_depth):
            with instrument.scope(f"sha{a}"):
                y, share = sha_forward(y, sub(p, f"ha.{a}"), cfg)
            shares.append(share)
        for i in range(cfg.lkd_depth):
            y = lkd_forward(y, cfg.lkd, sub(p, f"lkd.{i}"))
        y = add(y, x) if residual else y
        return esa_forward(y, sub(p, "esa")), shares


def receiving_block(x, p: dict, cfg: ModelConfig, shares):
    if len(shares) != cfg.ha_depth:
        raise ContractError(f"expected {cfg.ha_depth} shares, got {len(shares)}")
    with instrument.scope("rb"):
        y = _head(x, p, cfg)
        for a, share in enumerate(shares):
            with instrument.scope(f"rha{a}"):
                y = rha_forward(y, sub(p, f"ha.{a}"), cfg, share)
        return _tail(x, y, p, cfg)


def berfg(x, p: dict, cfg: ModelConfig):
    y, shares = sharing_block(x, sub(p, "sb"), cfg)
    return receiving_block(y, sub(p, "rb"), cfg, shares)


def ucan_forward(img, params: dict, cfg: ModelConfig):
    """(n, 3, H, W) in [0, 1] -> (n, 3, H*s, W*s).

    The input is zero-padded to a multiple of the window size and the output
    cropped back. Values outside [0, 1] are clamped with a warning.
    """
    img = np.asarray(img, dtype=DTYPE)
    if img.ndim != 4 or img.shape[1] != 3:
        raise DimensionError(f"expected an (n, 3, H, W) image, got {img.shape}")
    if img.min() < 0 or img.max() > 1:
        warnings.warn("input values outside [0, 1] were clamped", RuntimeWarning, stacklevel=2)
        img = np.clip(img, 0.0, 1.0)
    n, _, h, w = img.shape
    s = cfg.scale
    x = pad_to_multiple(img, cfg.wmsa_window)
    with instrument.scope("ucan"):
        f0 = _conv(x, params, "shallow")
        f = f0
        for g in range(cfg.groups):
            with instrument.scope(f"g{g}"):
                f = berfg(f, sub(params, f"g{g}"), cfg)
        fused = add(_conv(f, params, "fuse"), f0)
        out = pixel_shuffle(_conv(fused, params, "recon"), s)
    return np.ascontiguousarray(out[:, :, : h * s, : w * s])
