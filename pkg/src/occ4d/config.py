"""Run configuration: a flat key=value file with fail-fast unknown-key handling.

Defaults follow the published training recipe where one exists (VAE lr 1e-3,
DiT lr 1e-4, loss weights 1 / 0.005, patch size 2, EMA 0.9999, C=16, halving
downsample rates); everything else is the desk-scale default.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .hexplane import PlaneDims
from .vae import VaeSpec


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    seed: int = 0
    frames: int = 8
    size_x: int = 32
    size_y: int = 32
    size_z: int = 8
    num_classes: int = 6
    n_vehicles: int = 2
    n_pedestrians: int = 1
    n_sequences: int = 64
    # latent dims
    d_t: int = 2
    d_x: int = 2
    d_y: int = 2
    d_z: int = 2
    latent_channels: int = 16
    # vae
    vae_lr: float = 1e-3
    lovasz_weight: float = 1.0
    kl_weight: float = 0.005
    vae_batch: int = 4
    vae_steps: int = 2000
    vae_weight_decay: float = 0.01
    feat_channels: int = 32
    embed_channels: int = 16
    conv_channels: int = 24
    pe_bands: int = 4
    proj_layers: int = 2
    proj_heads: int = 2
    proj_head_dim: int = 16
    proj_dropout: float = 0.1
    proj_mlp_ratio: int = 2
    # dit
    dit_lr: float = 1e-4
    dit_width: int = 192
    dit_depth: int = 8
    dit_heads: int = 4
    patch_size: int = 2
    dit_batch: int = 16
    dit_steps: int = 5000
    dit_weight_decay: float = 0.0
    diffusion_steps: int = 200
    cond_dropout: float = 0.1
    ema_decay: float = 0.9999
    use_command: bool = False
    use_trajectory: bool = False
    use_layout: bool = False
    use_hexplane_cond: bool = False
    # sampler
    cfg_w: float = 1.0
    sample_seed: int = 0
    deterministic_sampler: bool = False
    n_samples: int = 1
    use_ema: bool = True
    # logging
    log_every: int = 25
    probe_every: int = 200
    probe_sequences: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            self.plane_dims()
        except Exception as exc:
            raise ConfigError(str(exc)) from exc
        if self.latent_channels < 1:
            raise ConfigError("latent_channels must be positive")
        for name in ("vae_lr", "dit_lr", "lovasz_weight", "kl_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not (0.0 <= self.cond_dropout < 1.0):
            raise ConfigError("cond_dropout must be in [0, 1)")
        if not (0.0 <= self.ema_decay <= 1.0):
            raise ConfigError("ema_decay must be in [0, 1]")
        if self.cfg_w < -1.0:
            raise ConfigError("cfg_w must be >= -1")
        if self.use_layout and self.use_hexplane_cond:
            raise ConfigError("enable at most one of use_layout / use_hexplane_cond")
        dims = self.plane_dims()
        for axis, v in (("Xl", dims.xl), ("Zl", dims.zl), ("Tl", dims.tl)):
            if v % self.patch_size:
                raise ConfigError(f"{axis}={v} not divisible by patch_size={self.patch_size}")

    def plane_dims(self) -> PlaneDims:
        return PlaneDims.from_grid(
            self.frames, self.size_x, self.size_y, self.size_z,
            self.d_t, self.d_x, self.d_y, self.d_z, self.latent_channels,
        )

    def vae_spec(self) -> VaeSpec:
        return VaeSpec(
            dims=self.plane_dims(),
            num_classes=self.num_classes,
            embed_channels=self.embed_channels,
            conv_channels=self.conv_channels,
            feat_channels=self.feat_channels,
            proj_layers=self.proj_layers,
            proj_heads=self.proj_heads,
            proj_head_dim=self.proj_head_dim,
            proj_dropout=self.proj_dropout,
            proj_mlp_ratio=self.proj_mlp_ratio,
            pe_bands=self.pe_bands,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.to_dict().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply CLI ``key=value`` overrides, returning a new validated config."""
    values = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return RunConfig(**values)


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    values: dict = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = stripped.split("=", 1)
            key = key.strip()
            if key not in _FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, raw)
    cfg = RunConfig(**values)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def save_config(cfg: RunConfig, path: str | Path) -> None:
    lines = [f"{k} = {v}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


def config_from_dict(values: dict) -> RunConfig:
    unknown = set(values) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return RunConfig(**values)
