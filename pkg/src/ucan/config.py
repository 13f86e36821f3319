"""Model configuration and its flat ``key = value`` text form."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass

from .attention import TileConfig
from .errors import ConfigError
from .large_kernel import LkdConfig


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    groups: int = 2
    ha_depth: int = 3
    heads: int = 4
    wmsa_window: int = 16
    hpa_window: int = 32
    lkd_k_core: int = 5
    lkd_dilation: int = 2
    lkd_k_extra: int | None = None
    lkd_reduction: int = 4
    lkd_depth: int = 4
    scale: int = 2
    seed: int = 0
    hedgehog_m: int = 1
    mlp_ratio: int = 2
    use_hpa: bool = True
    sharing: str = "semi"
    dfl_normalize: bool = True
    fourier: bool = False
    tile_rows: int = 128
    tile_cols: int = 128

    def __post_init__(self):
        c = self.channels
        if c < 16 or c % 2:
            raise ConfigError(f"channels must be an even number >= 16, got {c}")
        if self.heads < 1 or c % self.heads or (c // 2) % self.heads:
            raise ConfigError(f"heads={self.heads} must divide both {c} and {c // 2}")
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.sharing not in ("semi", "full"):
            raise ConfigError(f"sharing must be 'semi' or 'full', got {self.sharing!r}")
        for name in ("groups", "ha_depth", "wmsa_window", "hpa_window", "mlp_ratio", "tile_rows", "tile_cols"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lkd_depth < 0:
            raise ConfigError("lkd_depth must be >= 0")
        self.lkd  # validates kernel sizes and the bottleneck

    @property
    def lkd(self) -> LkdConfig:
        cfg = LkdConfig(self.lkd_k_core, self.lkd_dilation, self.lkd_k_extra, self.lkd_reduction, self.channels)
        if cfg.fine_channels % cfg.reduction:
            raise ConfigError(f"reduction {cfg.reduction} does not divide {cfg.fine_channels} fine channels")
        return cfg

    @property
    def tiles(self) -> TileConfig:
        return TileConfig(self.tile_rows, self.tile_cols)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict):
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, fields[key].default)
        return cls(**kwargs)


def _coerce(key, raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if key == "lkd_k_extra":
            return None if text.lower() in ("", "none", "-") else int(text)
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return text


def parse_config(text: str) -> ModelConfig:
    """Parse flat ``key = value`` lines (``#`` comments allowed)."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    try:
        parser.read_string("[model]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return ModelConfig.from_dict(dict(parser["model"]))


def format_config(cfg: ModelConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"
