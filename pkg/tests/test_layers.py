import numpy as np
import pytest

from stfusion.core.entities import DimensionError
from stfusion.core.gradcheck import grad_check
from stfusion.core.layers import (
    CbamParams,
    Conv2d,
    Conv2dParams,
    DsConvParams,
    LayerNormParams,
    bilinear_matrix,
    cbam,
    cbam_masks,
    conv2d,
    dsconv,
    linear,
    norm,
    upsample_bilinear,
    upsample_nearest,
)
from stfusion.core.tensor import Tensor, default_dtype


@pytest.fixture(autouse=True)
def float64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def naive_conv(x, w, b, stride, padding, groups):
    n, c, h, width = x.shape
    oc, gc, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((n, oc, ho, wo))
    per_group = oc // groups
    for o in range(oc):
        g = o // per_group
        for i in range(ho):
            for j in range(wo):
                window = xp[:, g * gc : (g + 1) * gc, i * stride : i * stride + kh, j * stride : j * stride + kw]
                out[:, o, i, j] = (window * w[o]).sum(axis=(1, 2, 3)) + (b[o] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("stride,padding,groups", [(1, 0, 1), (1, 1, 2), (2, 1, 1), (4, 0, 1), (1, 1, 4)])
def test_conv2d_matches_direct_loops(rng, stride, padding, groups):
    x = rng.normal(size=(2, 4, 8, 8))
    w = rng.normal(size=(4, 4 // groups, 3, 3))
    b = rng.normal(size=4)
    out = Conv2d.apply(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding, groups=groups)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, padding, groups), atol=1e-12)


def test_conv2d_rejects_bad_groups(rng):
    with pytest.raises(DimensionError):
        Conv2d.apply(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 1, 3, 3))), groups=2)
    with pytest.raises(DimensionError):
        Conv2dParams.create(rng, 3, 4, 3, groups=2)


def test_stem_conv_shape(rng):
    p = Conv2dParams.create(rng, 3, 16, 4, stride=4)
    assert conv2d(Tensor(np.zeros((1, 3, 64, 64))), p).shape == (1, 16, 16, 16)


def test_dsconv_is_depthwise_then_pointwise(rng):
    p = DsConvParams.create(rng, 6, 5)
    assert p.depthwise.weight.shape == (6, 1, 3, 3)
    assert p.pointwise.weight.shape == (5, 6, 1, 1)
    x = Tensor(rng.normal(size=(1, 6, 5, 5)))
    out = dsconv(x, p)
    expected = naive_conv(
        naive_conv(x.data, p.depthwise.weight.data, None, 1, 1, 6),
        p.pointwise.weight.data,
        p.pointwise.bias.data,
        1,
        0,
        1,
    )
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_dsconv_gradients(rng):
    p = DsConvParams.create(rng, 4, 3)
    x = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
    report = grad_check(lambda x, *_: (dsconv(x, p) ** 2.0).sum(), [x, *p.parameters()])
    assert report.passed, report.worst


def test_linear_projects_channel_axis(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    w = rng.normal(size=(6, 3))
    b = rng.normal(size=6)
    out = linear(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(out.data, np.einsum("oc,nchw->nohw", w, x) + b[None, :, None, None])
    with pytest.raises(DimensionError):
        linear(Tensor(x), Tensor(np.ones((6, 4))))


def test_layer_norm_normalizes_channels(rng):
    x = Tensor(rng.normal(3.0, 2.0, size=(2, 8, 3, 3)))
    out = norm(x, LayerNormParams.create(8)).data
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-4)


def test_cbam_masks_are_probabilities(rng):
    p = CbamParams.create(rng, 8, reduction=4, kernel=3)
    x = Tensor(rng.normal(size=(2, 8, 5, 5)))
    channel, spatial = cbam_masks(x, p)
    assert channel.shape == (2, 8, 1, 1)
    assert spatial.shape == (2, 1, 5, 5)
    assert np.all((channel.data > 0) & (channel.data < 1))
    np.testing.assert_allclose(cbam(x, p).data, channel.data * spatial.data * x.data, atol=1e-12)


def test_cbam_reduction_must_divide_channels(rng):
    with pytest.raises(DimensionError):
        CbamParams.create(rng, 6, reduction=4)
    p = CbamParams.create(rng, 8, reduction=4, kernel=3)
    with pytest.raises(DimensionError):
        cbam(Tensor(np.ones((1, 4, 3, 3))), p)


def test_upsample_nearest_repeats_pixels():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    out = upsample_nearest(x, 2).data[0, 0]
    np.testing.assert_array_equal(out, [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


def test_bilinear_rows_are_convex_weights():
    m = bilinear_matrix(5, 13)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    assert np.all(m >= 0)


def test_bilinear_preserves_constants_and_identity(rng):
    x = rng.normal(size=(1, 2, 4, 6))
    np.testing.assert_allclose(upsample_bilinear(Tensor(x), (4, 6)).data, x, atol=1e-12)
    flat = upsample_bilinear(Tensor(np.full((1, 1, 3, 3), 2.5)), (12, 12)).data
    np.testing.assert_allclose(flat, 2.5)


def test_cbam_with_zero_weights_scales_by_a_quarter(rng):
    p = CbamParams.create(rng, 8, reduction=4, kernel=3)
    for _, t in p.named_parameters():
        t.data = np.zeros_like(t.data)
    x = Tensor(rng.normal(size=(2, 8, 5, 5)))
    np.testing.assert_array_equal(cbam(x, p).data, 0.25 * x.data)
