"""
Gradient suites: every differentiable op, the scan, the losses and a micro model,
checked against central differences in 64-bit.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from loguru import logger
from tabulate import tabulate

from stfusion.core.entities import ALL_MECHANISMS, ConfigError, EncoderConfig, ModelConfig
from stfusion.core.fusion import fuse
from stfusion.core.gradcheck import REPORT_HEADERS, GradCheckReport, grad_check
from stfusion.core.layers import (
    CbamParams,
    Conv2d,
    cbam,
    layer_norm,
    linear,
    upsample_bilinear,
    upsample_nearest,
)
from stfusion.core.loss import change_probability, cross_entropy, dice_loss, lovasz_loss, total_loss
from stfusion.core.model import ChangeDetector
from stfusion.core.ssm import SelectiveScan, VssBlockParams, vss_block
from stfusion.core.tensor import Tensor, broadcast_to, concat, default_dtype, gather, interleave

OP_RTOL = 1e-4
MODEL_RTOL = 1e-3

Case = Callable[[np.random.Generator], GradCheckReport]


def _leaf(rng: np.random.Generator, shape, low: float = -2.0, high: float = 2.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _weights(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.uniform(-1.0, 1.0, size=shape))


def check_arithmetic(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4), 0.5, 2.0)
    return grad_check(lambda a, b: (a * b + a / b - a * a + b ** a - 3.0 * a).sum(), [a, b], OP_RTOL, name="arithmetic")


def check_unary(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4), 0.5, 2.0)

    def f(a, b):
        return (a.exp() + b.log() + a.sigmoid() + a.silu() + a.softplus() + a.abs() + a.relu() - a).sum()

    return grad_check(f, [a, b], OP_RTOL, name="unary")


def check_reductions(rng):
    a = _leaf(rng, (3, 5))
    w = _weights(rng, (3,))
    return grad_check(lambda a: (a.max(axis=1) * w).sum() + a.mean() * 2.0 + a.sum(axis=0).sum(), a, OP_RTOL, name="reductions")


def check_layout(rng):
    a = _leaf(rng, (2, 3, 4))
    w = _weights(rng, (4, 3, 2))
    return grad_check(lambda a: (a.reshape(2, 12).permute(1, 0).reshape(4, 3, 2).flip(1) * w).sum(), a, OP_RTOL, name="layout")


def check_slicing(rng):
    a = _leaf(rng, (4, 6))
    w = _weights(rng, (2, 3))
    return grad_check(lambda a: (a[1:3, ::2] * w).sum() + a[0].sum(), a, OP_RTOL, name="slicing")


def check_concat_interleave(rng):
    a, b = _leaf(rng, (2, 3, 2, 2)), _leaf(rng, (2, 3, 2, 2))
    w1, w2 = _weights(rng, (2, 6, 2, 2)), _weights(rng, (2, 3, 2, 4))

    def f(a, b):
        return (concat([a, b], axis=1) * w1).sum() + (interleave(a, b, axis=3) * w2).sum()

    return grad_check(f, [a, b], OP_RTOL, name="concat/interleave")


def check_broadcast_gather(rng):
    c, v = _leaf(rng, (3, 1)), _leaf(rng, (5,))
    index = np.array([4, 0, 0, 2])
    w1, w2 = _weights(rng, (3, 4)), _weights(rng, (4,))
    return grad_check(
        lambda c, v: (broadcast_to(c, (3, 4)) * w1).sum() + (gather(v, index) * w2).sum(),
        [c, v],
        OP_RTOL,
        name="broadcast/gather",
    )


def check_conv2d(rng):
    x, weight, bias = _leaf(rng, (2, 4, 5, 5)), _leaf(rng, (4, 2, 3, 3)), _leaf(rng, (4,))
    w = _weights(rng, (2, 4, 3, 3))
    return grad_check(
        lambda x, weight, bias: (Conv2d.apply(x, weight, bias, stride=2, padding=1, groups=2) * w).sum(),
        [x, weight, bias],
        OP_RTOL,
        name="conv2d",
    )


def check_linear_norm(rng):
    x, proj, bias = _leaf(rng, (2, 3, 2, 2)), _leaf(rng, (4, 3)), _leaf(rng, (4,))
    gamma, beta = _leaf(rng, (4,)), _leaf(rng, (4,))
    w = _weights(rng, (2, 4, 2, 2))

    def f(x, proj, bias, gamma, beta):
        return (layer_norm(linear(x, proj, bias), gamma, beta) * w).sum()

    return grad_check(f, [x, proj, bias, gamma, beta], OP_RTOL, name="linear/layer_norm")


def check_cbam(rng):
    x = _leaf(rng, (2, 8, 4, 4))
    p = CbamParams.create(rng, 8, reduction=4, kernel=3)
    w = _weights(rng, x.shape)
    return grad_check(lambda x, *_: (cbam(x, p) * w).sum(), [x, *p.parameters()], OP_RTOL, name="cbam")


def check_upsample(rng):
    x = _leaf(rng, (1, 2, 3, 4))
    w1, w2 = _weights(rng, (1, 2, 6, 8)), _weights(rng, (1, 2, 7, 9))
    return grad_check(
        lambda x: (upsample_nearest(x, 2) * w1).sum() + (upsample_bilinear(x, (7, 9)) * w2).sum(),
        x,
        OP_RTOL,
        name="upsample",
    )


def check_fusion(rng):
    f1, f2 = _leaf(rng, (1, 2, 3, 3)), _leaf(rng, (1, 2, 3, 3))
    weights = {kind: _weights(rng, fuse(kind, f1, f2).shape) for kind in ALL_MECHANISMS}

    def f(f1, f2):
        total = None
        for kind, w in weights.items():
            term = (fuse(kind, f1, f2) * w).sum()
            total = term if total is None else total + term
        return total

    return grad_check(f, [f1, f2], OP_RTOL, name="fusion")


def check_selective_scan(rng):
    x = _leaf(rng, (2, 3, 6))
    delta = _leaf(rng, (2, 3, 6), 0.1, 1.0)
    A = _leaf(rng, (3, 4), -2.0, -0.5)
    B, C = _leaf(rng, (2, 4, 6)), _leaf(rng, (2, 4, 6))
    D = _leaf(rng, (3,))
    w = _weights(rng, (2, 3, 6))
    return grad_check(
        lambda *inputs: (SelectiveScan.apply(*inputs) * w).sum(),
        [x, delta, A, B, C, D],
        OP_RTOL,
        name="selective_scan",
    )


def check_vss_block(rng):
    x = _leaf(rng, (1, 4, 3, 3))
    p = VssBlockParams.create(rng, 4, d_state=2, expand=2, dt_rank=1)
    w = _weights(rng, x.shape)
    return grad_check(
        lambda x, *_: (vss_block(x, p) * w).sum(), [x, *p.parameters()], OP_RTOL, max_coords=6, name="vss_block"
    )


def _loss_inputs(rng):
    logits = _leaf(rng, (2, 2, 4, 4))
    y = (rng.random((2, 4, 4)) < 0.4).astype(np.uint8)
    y[:, 0, 0] = 1
    return logits, y


def check_cross_entropy(rng):
    logits, y = _loss_inputs(rng)
    return grad_check(lambda z: cross_entropy(z, y), logits, OP_RTOL, name="cross_entropy")


def check_dice(rng):
    logits, y = _loss_inputs(rng)
    return grad_check(lambda z: dice_loss(change_probability(z), y), logits, OP_RTOL, name="dice")


def check_lovasz(rng):
    logits, y = _loss_inputs(rng)
    return grad_check(lambda z: lovasz_loss(z, y), logits, OP_RTOL, name="lovasz")


def check_total_loss(rng):
    logits, y = _loss_inputs(rng)
    return grad_check(lambda z: total_loss(z, y), logits, OP_RTOL, name="total_loss")


def micro_config() -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(stage_channels=(4, 4, 8, 8), stage_depths=(1, 1, 1, 1)),
        decoder_width=4,
        d_state=2,
        expand=1,
        dt_rank=1,
        cbam_reduction=4,
        cbam_kernel=3,
    )


def check_model(rng):
    model = ChangeDetector.create(micro_config(), seed=int(rng.integers(1 << 31)))
    x1 = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, 32, 32)), requires_grad=True)
    x2 = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, 32, 32)), requires_grad=True)
    y = (rng.random((1, 32, 32)) < 0.3).astype(np.uint8)
    named = list(model.named_parameters())
    # a strided subset of parameter tensors keeps the suite fast; the head is always included
    sampled = [p for i, (name, p) in enumerate(named) if i % 40 == 0 or name.startswith("decoder.head")]
    return grad_check(
        lambda x1, x2, *_: total_loss(model(x1, x2), y),
        [x1, x2, *sampled],
        MODEL_RTOL,
        max_coords=3,
        name="model",
    )


SUITES: dict[str, list[Case]] = {
    "tensor": [
        check_arithmetic,
        check_unary,
        check_reductions,
        check_layout,
        check_slicing,
        check_concat_interleave,
        check_broadcast_gather,
        check_conv2d,
        check_linear_norm,
        check_cbam,
        check_upsample,
        check_fusion,
    ],
    "ssm": [check_selective_scan, check_vss_block],
    "loss": [check_cross_entropy, check_dice, check_lovasz, check_total_loss],
    "model": [check_model],
}


def run_suite(module: str = "all", seed: int = 0) -> list[GradCheckReport]:
    if module != "all" and module not in SUITES:
        raise ConfigError(f"Unknown gradcheck module {module!r}, expected all or one of {sorted(SUITES)}")
    names = list(SUITES) if module == "all" else [module]
    reports = []
    with default_dtype(np.float64):
        for name in names:
            rng = np.random.default_rng([seed, list(SUITES).index(name)])
            for case in SUITES[name]:
                report = case(rng)
                logger.debug(f"{report.name}: max rel err {report.max_rel_error:.2e} over {report.checked} coordinates")
                reports.append(report)
    return reports


def on_gradcheck(module: str = "all", seed: int = 0) -> bool:
    reports = run_suite(module, seed)
    logger.info("\n" + tabulate([r.row() for r in reports], headers=REPORT_HEADERS))
    failed = [r.name for r in reports if not r.passed]
    if failed:
        logger.error(f"Gradient check failed for: {', '.join(failed)}")
        return False
    logger.info(f"All {len(reports)} gradient checks passed")
    return True
