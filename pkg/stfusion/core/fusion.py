"""
Spatio-temporal fusion of pre-event (f1) and post-event (f2) feature maps.

Token order is a row-major raster scan. Sequential and cross layouts are materialized
as width-doubled maps (N, C, H, 2W) so the same 2-D VSS block processes them.
"""
from __future__ import annotations

from typing import Callable

from stfusion.core.entities import DimensionError, FusionKind
from stfusion.core.tensor import Tensor, concat, deinterleave, interleave, split_halves

WIDTH_AXIS = 3
CHANNEL_AXIS = 1


def _check_pair(f1: Tensor, f2: Tensor) -> None:
    if f1.shape != f2.shape:
        raise DimensionError(f"Temporal features differ in shape: {f1.shape} vs {f2.shape}")
    if f1.ndim != 4:
        raise DimensionError(f"Expected NCHW features, got {f1.shape}")


def fuse_sequential(f1: Tensor, f2: Tensor) -> Tensor:
    _check_pair(f1, f2)
    return concat([f1, f2], axis=WIDTH_AXIS)


def fuse_cross(f1: Tensor, f2: Tensor) -> Tensor:
    _check_pair(f1, f2)
    return interleave(f1, f2, axis=WIDTH_AXIS)


def fuse_parallel(f1: Tensor, f2: Tensor) -> Tensor:
    _check_pair(f1, f2)
    return concat([f1, f2], axis=CHANNEL_AXIS)


def fuse_channel_cross(f1: Tensor, f2: Tensor) -> Tensor:
    _check_pair(f1, f2)
    return interleave(f1, f2, axis=CHANNEL_AXIS)


def fuse_difference(f1: Tensor, f2: Tensor) -> Tensor:
    _check_pair(f1, f2)
    return (f2 - f1).abs()


FUSERS: dict[FusionKind, Callable[[Tensor, Tensor], Tensor]] = {
    FusionKind.sequential: fuse_sequential,
    FusionKind.cross: fuse_cross,
    FusionKind.parallel: fuse_parallel,
    FusionKind.channel_cross: fuse_channel_cross,
    FusionKind.difference: fuse_difference,
}

WIDTH_DOUBLING = (FusionKind.sequential, FusionKind.cross)
CHANNEL_DOUBLING = (FusionKind.parallel, FusionKind.channel_cross)


def fuse(kind: FusionKind, f1: Tensor, f2: Tensor) -> Tensor:
    return FUSERS[FusionKind(kind)](f1, f2)


def fused_channels(kind: FusionKind, channels: int) -> int:
    return 2 * channels if FusionKind(kind) in CHANNEL_DOUBLING else channels


def unfuse(kind: FusionKind, y: Tensor) -> tuple[Tensor, Tensor]:
    """Recover (f1, f2) from an invertible fusion layout."""
    kind = FusionKind(kind)
    if kind == FusionKind.sequential:
        return split_halves(y, WIDTH_AXIS)
    if kind == FusionKind.cross:
        return deinterleave(y, WIDTH_AXIS)
    if kind == FusionKind.parallel:
        return split_halves(y, CHANNEL_AXIS)
    if kind == FusionKind.channel_cross:
        return deinterleave(y, CHANNEL_AXIS)
    raise DimensionError("difference fusion is not invertible")


def fold_back(y: Tensor, kind: FusionKind) -> Tensor:
    """Return a width-doubled map to frame shape by summing its T1- and T2-aligned halves."""
    kind = FusionKind(kind)
    if kind not in WIDTH_DOUBLING:
        raise DimensionError(f"fold_back applies to sequential or cross layouts, not {kind.value}")
    if y.ndim != 4 or y.shape[WIDTH_AXIS] % 2:
        raise DimensionError(f"fold_back needs an even width, got {y.shape}")
    first, second = unfuse(kind, y)
    return first + second
