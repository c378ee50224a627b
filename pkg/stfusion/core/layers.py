"""
Convolution, normalization, pooling, projection and attention primitives on NCHW tensors.
"""
from __future__ import annotations

import numpy as np

from stfusion.core.entities import DimensionError
from stfusion.core.params import ParamsModel, constant_init, uniform_init
from stfusion.core.tensor import Function, Tensor, broadcast_to, concat


def conv_output_size(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


class Conv2d(Function):
    """Grouped cross-correlation, accumulated one kernel tap at a time in a fixed order."""

    def forward(self, x, w, b=None, stride: int = 1, padding: int = 0, groups: int = 1):
        n, c, h, width = x.shape
        out_channels, group_channels, kh, kw = w.shape
        if c % groups or out_channels % groups or c // groups != group_channels:
            raise DimensionError(
                f"conv2d: input has {c} channels, weight {w.shape} with groups={groups}"
            )
        ho = conv_output_size(h, kh, stride, padding)
        wo = conv_output_size(width, kw, stride, padding)
        if ho < 1 or wo < 1:
            raise DimensionError(f"conv2d: input {x.shape} smaller than kernel {kh}x{kw} after padding")
        self.x_shape = x.shape
        self.stride, self.padding, self.groups = stride, padding, groups
        self.out_hw = (ho, wo)
        self.xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        self.wg = w.reshape(groups, out_channels // groups, group_channels, kh, kw)
        self.has_bias = b is not None
        out = np.zeros((n, groups, out_channels // groups, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = self._patch(i, j)
                out += np.einsum("ngchw,goc->ngohw", patch, self.wg[..., i, j], optimize=True)
        out = out.reshape(n, out_channels, ho, wo)
        if b is not None:
            out = out + b.reshape(1, -1, 1, 1)
        return out

    def _patch(self, i: int, j: int) -> np.ndarray:
        ho, wo = self.out_hw
        s = self.stride
        n, c = self.xp.shape[:2]
        patch = self.xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
        return patch.reshape(n, self.groups, c // self.groups, ho, wo)

    def backward(self, grad):
        n = grad.shape[0]
        ho, wo = self.out_hw
        s, p = self.stride, self.padding
        g, og, cg, kh, kw = self.wg.shape
        grad_g = grad.reshape(n, g, og, ho, wo)
        gxp = np.zeros_like(self.xp)
        gw = np.zeros_like(self.wg)
        for i in range(kh):
            for j in range(kw):
                patch = self._patch(i, j)
                gw[..., i, j] = np.einsum("ngohw,ngchw->goc", grad_g, patch, optimize=True)
                gpatch = np.einsum("ngohw,goc->ngchw", grad_g, self.wg[..., i, j], optimize=True)
                gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gpatch.reshape(
                    n, g * cg, ho, wo
                )
        h, w = self.x_shape[2:]
        gx = gxp[:, :, p : p + h, p : p + w]
        grads = [gx, gw.reshape(g * og, cg, kh, kw)]
        if self.has_bias:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return tuple(grads)


class Conv2dParams(ParamsModel):
    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        bias: bool = True,
    ) -> "Conv2dParams":
        if in_channels % groups or out_channels % groups:
            raise DimensionError(f"{in_channels}->{out_channels} channels not divisible by groups={groups}")
        fan_in = in_channels // groups * kernel * kernel
        return cls(
            weight=uniform_init(rng, (out_channels, in_channels // groups, kernel, kernel), fan_in),
            bias=uniform_init(rng, (out_channels,), fan_in) if bias else None,
            stride=stride,
            padding=padding,
            groups=groups,
        )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input, got {x.shape}")
    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)
    return Conv2d.apply(*inputs, stride=p.stride, padding=p.padding, groups=p.groups)


class DsConvParams(ParamsModel):
    depthwise: Conv2dParams
    pointwise: Conv2dParams

    @classmethod
    def create(cls, rng: np.random.Generator, in_channels: int, out_channels: int = 128) -> "DsConvParams":
        return cls(
            depthwise=Conv2dParams.create(rng, in_channels, in_channels, 3, padding=1, groups=in_channels, bias=False),
            pointwise=Conv2dParams.create(rng, in_channels, out_channels, 1),
        )


def dsconv(x: Tensor, p: DsConvParams) -> Tensor:
    return conv2d(conv2d(x, p.depthwise), p.pointwise)


class Linear(Function):
    """Projection along axis 1 of an (N, C, ...) tensor: y[n, o, ...] = sum_c w[o, c] x[n, c, ...] + b[o]."""

    def forward(self, x, w, b=None):
        if x.shape[1] != w.shape[1]:
            raise DimensionError(f"linear: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
        self.x_shape = x.shape
        self.x = x.reshape(x.shape[0], x.shape[1], -1)
        self.w = w
        self.has_bias = b is not None
        out = np.einsum("oc,ncm->nom", w, self.x, optimize=True)
        if b is not None:
            out = out + b.reshape(1, -1, 1)
        return out.reshape((x.shape[0], w.shape[0]) + x.shape[2:])

    def backward(self, grad):
        g = grad.reshape(grad.shape[0], grad.shape[1], -1)
        gx = np.einsum("oc,nom->ncm", self.w, g, optimize=True).reshape(self.x_shape)
        gw = np.einsum("nom,ncm->oc", g, self.x, optimize=True)
        if self.has_bias:
            return gx, gw, g.sum(axis=(0, 2))
        return gx, gw


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Linear.apply(*inputs)


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps: float):
        if x.shape[1] != gamma.shape[0]:
            raise DimensionError(f"layer_norm: {x.shape[1]} channels, gamma has {gamma.shape[0]}")
        param_shape = (1, -1) + (1,) * (x.ndim - 2)
        mean = x.mean(axis=1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = centered * self.inv_std
        self.gamma = gamma.reshape(param_shape)
        self.reduce_axes = (0,) + tuple(range(2, x.ndim))
        return self.xhat * self.gamma + beta.reshape(param_shape)

    def backward(self, grad):
        c = self.xhat.shape[1]
        gxhat = grad * self.gamma
        gx = (
            self.inv_std
            / c
            * (
                c * gxhat
                - gxhat.sum(axis=1, keepdims=True)
                - self.xhat * (gxhat * self.xhat).sum(axis=1, keepdims=True)
            )
        )
        ggamma = (grad * self.xhat).sum(axis=self.reduce_axes)
        gbeta = grad.sum(axis=self.reduce_axes)
        return gx, ggamma, gbeta


class LayerNormParams(ParamsModel):
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-6

    @classmethod
    def create(cls, channels: int, eps: float = 1e-6) -> "LayerNormParams":
        return cls(gamma=constant_init((channels,), 1.0), beta=constant_init((channels,), 0.0), eps=eps)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def norm(x: Tensor, p: LayerNormParams) -> Tensor:
    return layer_norm(x, p.gamma, p.beta, p.eps)


def global_pools(x: Tensor) -> tuple[Tensor, Tensor]:
    """Average and max over H, W; both (N, C, 1, 1)."""
    n, c, h, w = x.shape
    if h * w == 0:
        raise DimensionError("global pooling over an empty spatial extent")
    flat = x.reshape(n, c, h * w)
    return flat.mean(axis=2).reshape(n, c, 1, 1), flat.max(axis=2).reshape(n, c, 1, 1)


def channel_pools(x: Tensor) -> tuple[Tensor, Tensor]:
    """Average and max over C; both (N, 1, H, W)."""
    if x.shape[1] == 0:
        raise DimensionError("channel pooling over zero channels")
    return x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)


class CbamParams(ParamsModel):
    mlp_w1: Tensor
    mlp_w2: Tensor
    spatial_kernel: Tensor
    reduction: int

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int, reduction: int = 16, kernel: int = 7) -> "CbamParams":
        if channels % reduction:
            raise DimensionError(f"CBAM reduction {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        return cls(
            mlp_w1=uniform_init(rng, (hidden, channels), channels),
            mlp_w2=uniform_init(rng, (channels, hidden), hidden),
            spatial_kernel=uniform_init(rng, (1, 2, kernel, kernel), 2 * kernel * kernel),
            reduction=reduction,
        )

    @property
    def channels(self) -> int:
        return self.mlp_w1.shape[1]


def cbam_masks(x: Tensor, p: CbamParams) -> tuple[Tensor, Tensor]:
    """Channel mask (N, C, 1, 1) and spatial mask (N, 1, H, W), both computed from x."""
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise DimensionError(f"cbam: input {x.shape} does not match {p.channels} channels")
    avg, mx = global_pools(x)

    def mlp(v: Tensor) -> Tensor:
        return linear(linear(v, p.mlp_w1).relu(), p.mlp_w2)

    channel_mask = (mlp(avg) + mlp(mx)).sigmoid()
    avg_c, max_c = channel_pools(x)
    kernel = p.spatial_kernel.shape[-1]
    spatial = Conv2d.apply(concat([avg_c, max_c], axis=1), p.spatial_kernel, padding=kernel // 2)
    return channel_mask, spatial.sigmoid()


def cbam(x: Tensor, p: CbamParams) -> Tensor:
    channel_mask, spatial_mask = cbam_masks(x, p)
    refined = broadcast_to(channel_mask, x.shape) * x
    return broadcast_to(spatial_mask, x.shape) * refined


class UpsampleNearest(Function):
    def forward(self, x, scale: int):
        self.scale = scale
        return x.repeat(scale, axis=2).repeat(scale, axis=3)

    def backward(self, grad):
        n, c, h, w = grad.shape
        s = self.scale
        return (grad.reshape(n, c, h // s, s, w // s, s).sum(axis=(3, 5)),)


def upsample_nearest(x: Tensor, scale: int = 2) -> Tensor:
    return UpsampleNearest.apply(x, scale=scale)


def bilinear_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Interpolation weights (out, in) with half-pixel centres, edges clamped."""
    scale = in_size / out_size
    src = np.maximum((np.arange(out_size) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    matrix = np.zeros((out_size, in_size), dtype=dtype)
    rows = np.arange(out_size)
    np.add.at(matrix, (rows, i0), 1.0 - frac)
    np.add.at(matrix, (rows, i1), frac)
    return matrix


class UpsampleBilinear(Function):
    def forward(self, x, size: tuple[int, int]):
        self.uh = bilinear_matrix(x.shape[2], size[0], x.dtype)
        self.uw = bilinear_matrix(x.shape[3], size[1], x.dtype)
        return np.einsum("ph,nchw,qw->ncpq", self.uh, x, self.uw, optimize=True)

    def backward(self, grad):
        return (np.einsum("ph,ncpq,qw->nchw", self.uh, grad, self.uw, optimize=True),)


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    return UpsampleBilinear.apply(x, size=tuple(size))

