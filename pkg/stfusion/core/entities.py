from __future__ import annotations

import math
from enum import Enum
from typing import Literal

import numpy as np
import yaml
from loguru import logger
from pydantic import BaseModel, Field, validator


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class DataError(Exception):
    pass


class NumericError(ArithmeticError):
    def __init__(self, message: str, source: str | None = None):
        super().__init__(message)
        self.source = source


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class FusionKind(str, Enum):
    sequential = "sequential"
    cross = "cross"
    parallel = "parallel"
    channel_cross = "channel_cross"
    difference = "difference"


ALL_MECHANISMS: list[FusionKind] = list(FusionKind)

Preset = Literal["tiny", "small", "base"]
Precision = Literal["float32", "float64"]


class YamlModel(BaseModel):
    def to_yaml(self) -> str:
        return yaml.safe_dump(_plain(self.dict()), sort_keys=True)

    @classmethod
    def from_yaml(cls, yaml_str: str):
        data = yaml.safe_load(yaml_str) or {}
        return cls.parse_obj(data)


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


class EncoderConfig(YamlModel):
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    stage_depths: tuple[int, int, int, int] = (1, 1, 2, 1)
    stem_factor: int = 4
    downsample_factor: int = 2

    @validator("stage_channels")
    def channels_nondecreasing(cls, channels):
        if any(c <= 0 for c in channels):
            raise ValueError("stage channels must be positive")
        if any(b < a for a, b in zip(channels, channels[1:])):
            raise ValueError(f"stage channels must be nondecreasing, got {channels}")
        return tuple(channels)

    @validator("stage_depths")
    def depths_positive(cls, depths):
        if any(d <= 0 for d in depths):
            raise ValueError("stage depths must be positive")
        return tuple(depths)

    @property
    def input_multiple(self) -> int:
        return self.stem_factor * self.downsample_factor ** (len(self.stage_channels) - 1)


# base uses 512 channels in stage 3; pass stage_channels explicitly for other widths
PRESETS: dict[str, dict] = {
    "tiny": dict(
        encoder=dict(stage_channels=(16, 32, 64, 128), stage_depths=(1, 1, 2, 1)),
        decoder_width=32,
        d_state=4,
        cbam_reduction=4,
        cbam_kernel=3,
    ),
    "small": dict(
        encoder=dict(stage_channels=(64, 128, 256, 512), stage_depths=(1, 1, 4, 1)),
        decoder_width=64,
        d_state=8,
        cbam_reduction=8,
        cbam_kernel=7,
    ),
    "base": dict(
        encoder=dict(stage_channels=(128, 256, 512, 1024), stage_depths=(2, 2, 15, 2)),
        decoder_width=128,
        d_state=16,
        cbam_reduction=16,
        cbam_kernel=7,
    ),
}


class ModelConfig(YamlModel):
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    decoder_width: int = 32
    d_state: int = 4
    expand: int = 2
    dt_rank: int | None = None
    cbam_reduction: int = 4
    cbam_kernel: int = 3
    mechanisms: list[FusionKind] = Field(default_factory=lambda: list(ALL_MECHANISMS))
    ecr: bool = True

    @validator("mechanisms")
    def at_least_one_mechanism(cls, mechanisms):
        if not mechanisms:
            raise ValueError("at least one fusion mechanism must be enabled")
        # canonical order keeps concatenation layout independent of how toggles were given
        return [kind for kind in ALL_MECHANISMS if kind in mechanisms]

    @validator("cbam_kernel")
    def odd_kernel(cls, kernel):
        if kernel % 2 != 1:
            raise ValueError("CBAM spatial kernel must be odd")
        return kernel

    @property
    def concat_width(self) -> int:
        return self.decoder_width * len(self.mechanisms)

    def rank_for(self, channels: int) -> int:
        return self.dt_rank if self.dt_rank is not None else max(1, math.ceil(channels / 16))

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "ModelConfig":
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
        values = {**PRESETS[preset]}
        encoder_overrides = overrides.pop("encoder", None) or {}
        values["encoder"] = {**values["encoder"], **encoder_overrides}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.parse_obj(values)


class LossWeights(YamlModel):
    w_ce: float = 1.0
    w_lovasz: float = 0.5
    w_dice: float = 0.35

    @validator("w_ce", "w_lovasz", "w_dice")
    def non_negative(cls, weight):
        if weight < 0:
            raise ValueError("loss weights must be non-negative")
        return weight

    @classmethod
    def from_string(cls, text: str) -> "LossWeights":
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 3:
            raise ConfigError(f"Expected three comma-separated loss weights, got {text!r}")
        try:
            w_ce, w_lovasz, w_dice = (float(p) for p in parts)
        except ValueError as e:
            raise ConfigError(f"Could not parse loss weights {text!r}: {e}")
        return cls(w_ce=w_ce, w_lovasz=w_lovasz, w_dice=w_dice)


class TrainConfig(YamlModel):
    preset: Preset = "tiny"
    lr: float = 1e-4
    weight_decay: float = 5e-3
    batch_size: int = 4
    iterations: int = 2_000
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    lovasz_per_image: bool = True
    use_diff: bool = True
    use_chn: bool = True
    use_dice: bool = True
    use_ecr: bool = True
    decoder_width: int | None = None
    precision: Precision = "float32"
    eval_every: int = 200
    patch_size: int = 256
    augment: bool = False

    @validator("lr")
    def positive_lr(cls, lr):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        return lr

    @validator("batch_size", "iterations", "eval_every", "patch_size")
    def positive_count(cls, value):
        if value < 1:
            raise ValueError("must be at least 1")
        return value

    @validator("loss_weights", pre=True)
    def parse_weights(cls, value):
        if isinstance(value, str):
            return LossWeights.from_string(value)
        return value

    def to_model_config(self) -> ModelConfig:
        mechanisms = [
            kind
            for kind in ALL_MECHANISMS
            if not (kind == FusionKind.difference and not self.use_diff)
            and not (kind == FusionKind.channel_cross and not self.use_chn)
        ]
        return ModelConfig.from_preset(
            self.preset,
            mechanisms=mechanisms,
            ecr=self.use_ecr,
            decoder_width=self.decoder_width,
        )

    def effective_loss_weights(self) -> LossWeights:
        if self.use_dice:
            return self.loss_weights
        return self.loss_weights.copy(update={"w_dice": 0.0})


class SynthConfig(YamlModel):
    size: int = 64
    min_shapes: int = 2
    max_shapes: int = 5
    p_add: float = 0.35
    p_remove: float = 0.3
    p_alter: float = 0.2
    noise: float = 0.02
    illumination: float = 0.1
    seed: int = 0

    @validator("p_add", "p_remove", "p_alter")
    def probability(cls, p):
        if not 0.0 <= p <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        return p

    @validator("max_shapes")
    def shape_range(cls, max_shapes, values):
        if max_shapes < values.get("min_shapes", 0):
            raise ValueError("max_shapes must be >= min_shapes")
        return max_shapes


class ConfusionCounts(BaseModel):
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @validator("tp", "fp", "fn", "tn")
    def non_negative(cls, count):
        if count < 0:
            raise ValueError("confusion counts must be non-negative")
        return count

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            tn=self.tn + other.tn,
        )


METRIC_COLUMNS = ["pre", "rec", "f1", "iou", "oa", "kc"]


class Metrics(BaseModel):
    pre: float
    rec: float
    f1: float
    iou: float
    oa: float
    kc: float
    undefined: list[str] = []

    def percentages(self) -> dict[str, str]:
        return {name: f"{100 * getattr(self, name):.2f}" for name in METRIC_COLUMNS}

    def report(self) -> str:
        lines = [f"{name.upper():>4}: {value}%" for name, value in self.percentages().items()]
        if self.undefined:
            logger.warning(f"Undefined ratios reported as 0: {', '.join(self.undefined)}")
            lines.append(f"undefined: {', '.join(self.undefined)}")
        return "\n".join(lines)


class BiTemporalSample(BaseModel):
    """Pre/post images (3, H, W) in [0, 1] and a binary change label (H, W)."""

    name: str
    pre: np.ndarray
    post: np.ndarray
    label: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @validator("label")
    def consistent_shapes(cls, label, values):
        pre, post = values.get("pre"), values.get("post")
        if pre is None or post is None:
            return label
        if pre.ndim != 3 or pre.shape[0] != 3 or pre.shape != post.shape:
            raise ValueError(f"images must both be (3, H, W), got {pre.shape} and {post.shape}")
        if label.shape != pre.shape[1:]:
            raise ValueError(f"label {label.shape} does not match images {pre.shape}")
        if not np.isin(label, (0, 1)).all():
            raise ValueError("label must be binary")
        return label.astype(np.uint8)

    @property
    def size(self) -> tuple[int, int]:
        return self.label.shape
