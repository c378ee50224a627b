"""
Siamese hierarchical VSS backbone.

Stage i works at H / (stem * 2^(i-1)); the stem is a stride-4 patch embedding and every
later stage starts with a stride-2 convolution that widens the channels.
"""
from __future__ import annotations

import numpy as np
from pydantic import BaseModel

from stfusion.core.entities import DimensionError, EncoderConfig
from stfusion.core.layers import Conv2dParams, LayerNormParams, conv2d, norm
from stfusion.core.params import ParamsModel
from stfusion.core.ssm import VssBlockParams, vss_block
from stfusion.core.tensor import Tensor, concat


class FeaturePyramid(BaseModel):
    stages: list[Tensor]

    class Config:
        arbitrary_types_allowed = True

    def __getitem__(self, index: int) -> Tensor:
        return self.stages[index]

    def __len__(self) -> int:
        return len(self.stages)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [stage.shape for stage in self.stages]


class EncoderStageParams(ParamsModel):
    downsample: Conv2dParams | None = None
    blocks: list[VssBlockParams]


class EncoderParams(ParamsModel):
    stem: Conv2dParams
    stem_norm: LayerNormParams
    stages: list[EncoderStageParams]

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        cfg: EncoderConfig,
        d_state: int = 16,
        expand: int = 2,
        dt_rank: int | None = None,
        in_channels: int = 3,
    ) -> "EncoderParams":
        channels = cfg.stage_channels
        stages = []
        for i, (width, depth) in enumerate(zip(channels, cfg.stage_depths)):
            downsample = None
            if i > 0:
                factor = cfg.downsample_factor
                downsample = Conv2dParams.create(rng, channels[i - 1], width, factor, stride=factor)
            blocks = [VssBlockParams.create(rng, width, d_state, expand, dt_rank) for _ in range(depth)]
            stages.append(EncoderStageParams(downsample=downsample, blocks=blocks))
        return cls(
            stem=Conv2dParams.create(rng, in_channels, channels[0], cfg.stem_factor, stride=cfg.stem_factor),
            stem_norm=LayerNormParams.create(channels[0]),
            stages=stages,
        )


def encode(x: Tensor, cfg: EncoderConfig, params: EncoderParams) -> FeaturePyramid:
    if x.ndim != 4:
        raise DimensionError(f"encode expects (N, 3, H, W), got {x.shape}")
    multiple = cfg.input_multiple
    if x.shape[2] % multiple or x.shape[3] % multiple:
        raise DimensionError(f"Input {x.shape[2]}x{x.shape[3]} is not divisible by {multiple}")
    features = norm(conv2d(x, params.stem), params.stem_norm)
    outputs = []
    for stage in params.stages:
        if stage.downsample is not None:
            features = conv2d(features, stage.downsample)
        for block in stage.blocks:
            features = vss_block(features, block)
        outputs.append(features)
    return FeaturePyramid(stages=outputs)


def encode_pair(
    x1: Tensor, x2: Tensor, cfg: EncoderConfig, params: EncoderParams
) -> tuple[FeaturePyramid, FeaturePyramid]:
    """Both streams go through one parameter set; they are batched together and split afterwards."""
    if x1.shape != x2.shape:
        raise DimensionError(f"Pre- and post-event inputs differ in shape: {x1.shape} vs {x2.shape}")
    n = x1.shape[0]
    joint = encode(concat([x1, x2], axis=0), cfg, params)
    first = FeaturePyramid(stages=[stage[:n] for stage in joint.stages])
    second = FeaturePyramid(stages=[stage[n:] for stage in joint.stages])
    return first, second
