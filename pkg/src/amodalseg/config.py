"""Dataclass configs shared by every training stage.

Desk-scale defaults are used throughout; `paper_scale()` returns the
full-size settings (256x256 crops, 12-layer width-768 transformer,
256-entry codebook) for reference runs.
"""
from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

ABLATION_FLAGS = ("no_refine", "single_branch", "no_attention", "no_roll", "no_sttb", "gt_visible")
STAGES = ("vq", "transformer", "refine", "video")
LR_SCHEDULES = ("constant", "cosine")


class ConfigError(ValueError):
    pass


@dataclass
class CodecConfig:
    input_size: int = 32
    factor: int = 4
    codebook_size: int = 64
    n_z: int = 8
    hidden: int = 64
    res_blocks: int = 0
    latent_kernel: int = 1  # kernel of the convs touching the latent grid; 1 keeps codes local

    @property
    def latent_size(self) -> int:
        return self.input_size // self.factor

    def validate(self) -> None:
        if self.input_size <= 0 or self.factor <= 0 or self.codebook_size <= 0 or self.n_z <= 0:
            raise ConfigError("codec sizes must be positive")
        if self.factor & (self.factor - 1):
            raise ConfigError(f"downsampling factor must be a power of two, got {self.factor}")
        if self.input_size % self.factor:
            raise ConfigError(f"input size {self.input_size} not divisible by factor {self.factor}")
        if self.latent_kernel not in (1, 3) or self.res_blocks < 0:
            raise ConfigError("latent_kernel must be 1 or 3 and res_blocks >= 0")


@dataclass
class VqLossConfig:
    beta: float = 0.25
    delta: float = 1e-6
    lambda_mode: str = "adaptive"  # or "fixed"
    fixed_lambda: float = 0.1
    gan_enabled: bool = False

    def validate(self) -> None:
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.delta <= 0:
            raise ConfigError("delta must be > 0")
        if self.lambda_mode not in ("fixed", "adaptive"):
            raise ConfigError(f"unknown lambda_mode {self.lambda_mode!r}")


@dataclass
class MaskingPolicy:
    ratio_low: float = 0.5
    ratio_high: float = 1.0

    def validate(self) -> None:
        if not 0 < self.ratio_low <= self.ratio_high <= 1:
            raise ConfigError("need 0 < ratio_low <= ratio_high <= 1")


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    layers: int = 2
    mlp_ratio: int = 4
    frames: int = 4  # video only
    backbone_stages: int = 2  # stride-2 stages; must equal log2(codec factor)

    def validate(self) -> None:
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")


@dataclass
class TrainConfig:
    stage: str = "transformer"
    learning_rate: float = 3e-4
    batch_size: int = 16
    iterations: int = 5000
    K: int = 3
    gamma: str = "cosine"
    seed: int = 0
    log_every: int = 250
    checkpoint_every: int = 1000
    augment_visible: bool = True
    lr_schedule: str = "cosine"  # or "constant"
    warmup_steps: int = 200
    min_train_occlusion: float = 0.05  # transformer/refine crops below this rate are skipped
    refine_backbone: str = "finetune"  # or "shared": reuse the frozen coarse-stage backbone
    # ablation flags
    no_refine: bool = False
    single_branch: bool = False
    no_attention: bool = False
    no_roll: bool = False
    no_sttb: bool = False
    gt_visible: bool = False  # feed clean GT visible masks instead of augmented ones at eval
    codec: CodecConfig = field(default_factory=CodecConfig)
    vq_loss: VqLossConfig = field(default_factory=VqLossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    masking: MaskingPolicy = field(default_factory=MaskingPolicy)

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.iterations < 0:
            raise ConfigError("learning rate and batch size must be positive, iterations >= 0")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.lr_schedule not in LR_SCHEDULES or self.warmup_steps < 0:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES} and warmup_steps >= 0")
        if self.refine_backbone not in ("shared", "finetune"):
            raise ConfigError(f"refine_backbone must be 'shared' or 'finetune', got {self.refine_backbone!r}")
        if not 0 <= self.min_train_occlusion < 1:
            raise ConfigError("min_train_occlusion must lie in [0, 1)")
        if self.single_branch and self.no_refine:
            raise ConfigError("single_branch requires the refinement stage (no_refine is set)")
        if self.no_roll and self.no_sttb:
            raise ConfigError("no_roll is meaningless without the spatio-temporal block")
        if 2 ** self.model.backbone_stages != self.codec.factor:
            raise ConfigError("backbone stride must match the codec downsampling factor")
        self.codec.validate()
        self.vq_loss.validate()
        self.model.validate()
        self.masking.validate()

    def lr_multiplier(self, step: int) -> float:
        """Factor on ``learning_rate`` at 0-based ``step``: linear warmup, then constant or cosine decay."""
        if step < self.warmup_steps:
            return (step + 1) / self.warmup_steps
        if self.lr_schedule == "constant":
            return 1.0
        span = max(self.iterations - self.warmup_steps, 1)
        return 0.5 * (1.0 + math.cos(math.pi * min(step - self.warmup_steps, span) / span))

    def ablations(self) -> dict[str, bool]:
        return {name: getattr(self, name) for name in ABLATION_FLAGS}


def paper_scale() -> TrainConfig:
    """Full-size settings for image datasets."""
    return TrainConfig(
        batch_size=16,
        iterations=45_000,
        codec=CodecConfig(input_size=256, factor=4, codebook_size=256, n_z=256, hidden=128),
        model=ModelConfig(d=768, heads=12, layers=12, backbone_stages=2),
    )


def _coerce(raw: str, current: Any) -> Any:
    if isinstance(current, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw.strip()


def apply_overrides(cfg: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    """Apply dotted `key=value` overrides, e.g. ``codec.codebook_size=256``."""
    for key, raw in overrides.items():
        target: Any = cfg
        *parents, leaf = key.split(".")
        for p in parents:
            if not hasattr(target, p):
                raise ConfigError(f"unknown config section {p!r} in {key!r}")
            target = getattr(target, p)
        if not dataclasses.is_dataclass(target) or not hasattr(target, leaf):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, leaf, _coerce(raw, getattr(target, leaf)))
    return cfg


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> TrainConfig:
    """Read an INI-style key-value file.

    Keys in ``[train]`` set top-level fields; sections ``[codec]``,
    ``[vq_loss]``, ``[model]`` and ``[masking]`` set the nested configs.
    """
    cfg = TrainConfig()
    flat: dict[str, str] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep case: K is a field name
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            for key, value in parser.items(section):
                flat[key if section == "train" else f"{section}.{key}"] = value
    flat.update(overrides or {})
    apply_overrides(cfg, flat)
    cfg.validate()
    return cfg


def to_dict(cfg: Any) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    nested = {
        "codec": CodecConfig,
        "vq_loss": VqLossConfig,
        "model": ModelConfig,
        "masking": MaskingPolicy,
    }
    for key, cls in nested.items():
        if key in d:
            d[key] = cls(**d[key])
    return TrainConfig(**d)
