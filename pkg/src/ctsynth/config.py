"""Run configuration: one nested dataclass tree, JSON in and out.

Defaults follow the reference training recipe (batch size 2, learning rate
1e-4, Adam with linear-to-zero polynomial decay, 0.15 conditioning dropout,
1000 forward-process steps, denoiser widths 64/128/256/512). The desk profile
swaps in a configuration small enough to train on a single CPU core in
minutes: 64x64x32 grids, a (16, 32) codec, an (8, 16, 32, 64) denoiser and a
learning rate that can actually overfit eight phantoms inside that budget.

Parsing is strict: unknown keys anywhere in the tree are rejected by name,
because a silently ignored typo in an experiment config is a week of wrong
conclusions. ``CTSYNTH_CONFIG`` may point at a default config file; it is the
only environment variable the package reads, and it only supplies the path.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ConfigError

CONFIG_PATH_ENV = "CTSYNTH_CONFIG"


@dataclass
class DataConfig:
    manifest: str = "manifest.jsonl"
    grid_shape: tuple[int, int, int] = (480, 480, 256)

    def validate(self):
        if len(self.grid_shape) != 3 or any(g < 4 for g in self.grid_shape):
            raise ConfigError(f"data.grid_shape must be 3 dims >= 4, got {self.grid_shape}")


@dataclass
class CodecConfig:
    widths: tuple[int, int] = (32, 64)
    latent_channels: int = 4
    kl_weight: float = 1e-6
    lr: float = 1e-4
    batch_size: int = 2
    epochs: int = 200
    seed: int = 0

    def validate(self):
        if len(self.widths) != 2 or any(w < 1 for w in self.widths):
            raise ConfigError(f"codec.widths must be two positive ints, got {self.widths}")
        if self.latent_channels < 1:
            raise ConfigError("codec.latent_channels must be >= 1")
        if self.kl_weight < 0:
            raise ConfigError("codec.kl_weight must be >= 0")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("codec lr/batch_size/epochs must be positive")


@dataclass
class DenoiserConfig:
    channel_widths: tuple[int, ...] = (64, 128, 256, 512)
    context_dim: int = 2560
    num_heads: int = 8
    time_embed_dim: int = 256
    cross_attention_levels: tuple[int, ...] | None = None  # None: last two levels

    def validate(self):
        w = self.channel_widths
        if len(w) < 2 or any(b <= a for a, b in zip(w, w[1:])):
            raise ConfigError(
                f"denoiser.channel_widths must be strictly increasing, got {w}"
            )
        levels = self.attention_levels()
        if any(not 0 <= l < len(w) for l in levels):
            raise ConfigError(f"cross_attention_levels out of range: {levels}")
        if any(width % self.num_heads for width in self.attention_widths()):
            raise ConfigError(
                f"attention widths {self.attention_widths()} must divide by "
                f"num_heads={self.num_heads}"
            )
        if self.time_embed_dim % 2:
            raise ConfigError("denoiser.time_embed_dim must be even")

    def attention_levels(self) -> tuple[int, ...]:
        if self.cross_attention_levels is not None:
            return tuple(self.cross_attention_levels)
        n = len(self.channel_widths)
        return (n - 2, n - 1)

    def attention_widths(self) -> tuple[int, ...]:
        return tuple(self.channel_widths[l] for l in self.attention_levels())


@dataclass
class DiffusionConfig:
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    num_train_steps: int = 1000
    lr: float = 1e-4
    adam_beta2: float = 0.999
    batch_size: int = 2
    total_steps: int = 100_000
    warmup_steps: int = 0
    max_grad_norm: float | None = None
    drop_probability: float = 0.15
    seed: int = 0

    def validate(self):
        self.denoiser.validate()
        if self.num_train_steps < 1:
            raise ConfigError("diffusion.num_train_steps must be >= 1")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ConfigError(
                f"diffusion.drop_probability must be in [0, 1], got {self.drop_probability}"
            )
        if self.lr <= 0 or self.batch_size < 1 or self.total_steps < 1:
            raise ConfigError("diffusion lr/batch_size/total_steps must be positive")
        if not 0.0 < self.adam_beta2 < 1.0:
            raise ConfigError(f"diffusion.adam_beta2 must be in (0, 1), got {self.adam_beta2}")
        if self.warmup_steps < 0 or self.warmup_steps >= self.total_steps:
            raise ConfigError(
                f"diffusion.warmup_steps must be in [0, total_steps), got {self.warmup_steps}"
            )
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ConfigError(
                f"diffusion.max_grad_norm must be positive or None, got {self.max_grad_norm}"
            )


@dataclass
class SamplingConfig:
    cfg_scales: tuple[float, ...] = (0.0, 1.0, 3.0, 7.0)
    num_inference_steps: int = 30
    seeds: tuple[int, ...] = (0,)

    def validate(self):
        if self.num_inference_steps < 1:
            raise ConfigError("sampling.num_inference_steps must be >= 1")
        if any(s < 0 for s in self.cfg_scales):
            raise ConfigError(f"cfg scales must be >= 0, got {self.cfg_scales}")
        if not self.seeds:
            raise ConfigError("sampling.seeds must not be empty")


@dataclass
class EvalConfig:
    extractor_backend: str = "seeded-random-conv"
    extractor_feature_dim: int = 64
    extractor_seed: int = 0
    embedder_backend: str = "oracle-free"

    def validate(self):
        if self.extractor_feature_dim < 2:
            raise ConfigError("eval.extractor_feature_dim must be >= 2")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        for f in fields(self):
            getattr(self, f.name).validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def _coerce(value, annotation, path):
    if is_dataclass(annotation):
        if not isinstance(value, dict):
            raise ConfigError(f'config key "{path}" must be an object')
        return _from_dict(annotation, value, path)
    if isinstance(value, list):
        return tuple(value)
    return value


def _from_dict(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        here = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f'unknown config key "{here}"')
        ann = hints.get(key, type(value))
        # Optional[X] unwraps to X for coercion purposes.
        for arg in typing.get_args(ann):
            if is_dataclass(arg):
                ann = arg
        kwargs[key] = _coerce(value, ann, here)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return _from_dict(RunConfig, data).validate()


def load_config(path: str | Path | None = None) -> RunConfig:
    """Load a config file; fall back to $CTSYNTH_CONFIG, then pure defaults."""
    if path is None:
        path = os.environ.get(CONFIG_PATH_ENV) or None
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg}, line {e.lineno})") from e
    return config_from_dict(data)


def desk_profile() -> RunConfig:
    """Laptop-scale profile: trains end to end on one CPU core in minutes."""
    cfg = RunConfig(
        data=DataConfig(grid_shape=(64, 64, 32)),
        codec=CodecConfig(widths=(16, 32), lr=2e-3, batch_size=8, epochs=150),
        diffusion=DiffusionConfig(
            denoiser=DenoiserConfig(channel_widths=(8, 16, 32, 64), time_embed_dim=64),
            lr=2e-3,
            batch_size=8,
            total_steps=3000,
            seed=1,
        ),
        sampling=SamplingConfig(
            cfg_scales=(0.0, 1.0, 3.0, 7.0), num_inference_steps=30, seeds=(0, 1, 2)
        ),
    )
    return cfg.validate()
