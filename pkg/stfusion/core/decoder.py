"""
Multi-stage change decoder built from improved STSS blocks.

Per stage, every enabled fusion mechanism is projected to the decoder width (DSConv with
ECR, a plain 1x1 convolution without), processed by a VSS block and, for width-doubled
layouts, folded back to frame shape. The branches are concatenated, refined by CBAM
(ECR only) and reduced to the decoder width. Stages are merged top-down.
"""
from __future__ import annotations

import numpy as np

from stfusion.core.encoder import FeaturePyramid
from stfusion.core.entities import ConfigError, DimensionError, FusionKind, ModelConfig
from stfusion.core.fusion import WIDTH_DOUBLING, fold_back, fuse, fused_channels
from stfusion.core.layers import (
    CbamParams,
    Conv2dParams,
    DsConvParams,
    cbam,
    conv2d,
    dsconv,
    upsample_bilinear,
    upsample_nearest,
)
from stfusion.core.params import ParamsModel
from stfusion.core.ssm import VssBlockParams, vss_block
from stfusion.core.tensor import Tensor, concat


class MechanismParams(ParamsModel):
    project: DsConvParams | Conv2dParams
    vss: VssBlockParams


class StssStageParams(ParamsModel):
    mechanisms: dict[FusionKind, MechanismParams]
    cbam: CbamParams | None = None
    reduce: Conv2dParams

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int, cfg: ModelConfig) -> "StssStageParams":
        width = cfg.decoder_width
        mechanisms = {}
        for kind in cfg.mechanisms:
            in_channels = fused_channels(kind, channels)
            if cfg.ecr:
                project = DsConvParams.create(rng, in_channels, width)
            else:
                project = Conv2dParams.create(rng, in_channels, width, 1)
            vss = VssBlockParams.create(rng, width, cfg.d_state, cfg.expand, cfg.rank_for(width))
            mechanisms[kind] = MechanismParams(project=project, vss=vss)
        concat_width = width * len(mechanisms)
        return cls(
            mechanisms=mechanisms,
            cbam=CbamParams.create(rng, concat_width, cfg.cbam_reduction, cfg.cbam_kernel) if cfg.ecr else None,
            reduce=Conv2dParams.create(rng, concat_width, width, 1),
        )

    @property
    def concat_width(self) -> int:
        return self.reduce.weight.shape[1]


class DecoderParams(ParamsModel):
    stages: list[StssStageParams]
    head: Conv2dParams

    @classmethod
    def create(cls, rng: np.random.Generator, cfg: ModelConfig) -> "DecoderParams":
        return cls(
            stages=[StssStageParams.create(rng, channels, cfg) for channels in cfg.encoder.stage_channels],
            head=Conv2dParams.create(rng, cfg.decoder_width, 2, 1),
        )


def _project(x: Tensor, project: DsConvParams | Conv2dParams) -> Tensor:
    if isinstance(project, DsConvParams):
        return dsconv(x, project)
    return conv2d(x, project)


def stss_branches(f1: Tensor, f2: Tensor, p: StssStageParams) -> dict[FusionKind, Tensor]:
    """Per-mechanism outputs at frame shape (N, width, H_i, W_i)."""
    if f1.shape != f2.shape:
        raise DimensionError(f"Stage features differ in shape: {f1.shape} vs {f2.shape}")
    if not p.mechanisms:
        raise ConfigError("No fusion mechanism enabled")
    branches = {}
    for kind, mechanism in p.mechanisms.items():
        y = vss_block(_project(fuse(kind, f1, f2), mechanism.project), mechanism.vss)
        if kind in WIDTH_DOUBLING:
            y = fold_back(y, kind)
        branches[kind] = y
    shapes = {y.shape for y in branches.values()}
    if len(shapes) != 1:
        raise DimensionError(f"Fusion branches disagree in shape: {shapes}")
    return branches


def stss_stage(f1: Tensor, f2: Tensor, p: StssStageParams) -> Tensor:
    branches = stss_branches(f1, f2, p)
    fused = concat(list(branches.values()), axis=1)
    if p.cbam is not None:
        fused = cbam(fused, p.cbam)
    return conv2d(fused, p.reduce)


def decode(pyr1: FeaturePyramid, pyr2: FeaturePyramid, params: DecoderParams, image_size: tuple[int, int]) -> Tensor:
    if len(pyr1) != len(pyr2) or len(pyr1) != len(params.stages):
        raise DimensionError(
            f"Pyramids with {len(pyr1)} and {len(pyr2)} stages for a {len(params.stages)}-stage decoder"
        )
    if pyr1.shapes != pyr2.shapes:
        raise DimensionError(f"Pyramid shapes differ: {pyr1.shapes} vs {pyr2.shapes}")
    merged = None
    for level in reversed(range(len(params.stages))):
        stage_out = stss_stage(pyr1[level], pyr2[level], params.stages[level])
        if merged is not None:
            merged = stage_out + upsample_nearest(merged, 2)
        else:
            merged = stage_out
    return upsample_bilinear(conv2d(merged, params.head), image_size)


def predict(logits: Tensor | np.ndarray) -> np.ndarray:
    """Per-pixel argmax of (N, 2, H, W) logits; ties go to class 0."""
    scores = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if scores.ndim != 4 or scores.shape[1] != 2:
        raise DimensionError(f"predict expects (N, 2, H, W) logits, got {scores.shape}")
    return (scores[:, 1] > scores[:, 0]).astype(np.uint8)
