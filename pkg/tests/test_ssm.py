import numpy as np
import pytest

from stfusion.core.entities import DimensionError, DomainError
from stfusion.core.gradcheck import grad_check
from stfusion.core.ssm import (
    ScanParams,
    SelectiveScan,
    VssBlockParams,
    cross_scan_2d,
    scan_inputs,
    scan_recurrence,
    selective_scan_1d,
    vss_block,
)
from stfusion.core.tensor import Tensor, default_dtype


@pytest.fixture(autouse=True)
def float64():
    with default_dtype(np.float64):
        yield


def naive_scan(x, delta, A, B, C, D):
    """Scalar loops over batch, channel, state and time."""
    n, d, length = x.shape
    s = A.shape[1]
    y = np.zeros_like(x)
    for b in range(n):
        for c in range(d):
            h = np.zeros(s)
            for t in range(length):
                for k in range(s):
                    h[k] = np.exp(delta[b, c, t] * A[c, k]) * h[k] + delta[b, c, t] * B[b, k, t] * x[b, c, t]
                y[b, c, t] = sum(h[k] * C[b, k, t] for k in range(s)) + D[c] * x[b, c, t]
    return y


def random_scan_inputs(rng, n, d, s, length):
    return (
        rng.normal(size=(n, d, length)),
        rng.uniform(0.01, 1.0, size=(n, d, length)),
        -rng.uniform(0.5, 2.0, size=(d, s)),
        rng.normal(size=(n, s, length)),
        rng.normal(size=(n, s, length)),
        rng.normal(size=d),
    )


def test_scan_matches_naive_reference():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n, d, s, length = (int(v) for v in rng.integers(1, 5, size=4))
        inputs = random_scan_inputs(rng, n, d, s, length)
        out = SelectiveScan.apply(*(Tensor(a) for a in inputs))
        np.testing.assert_allclose(out.data, naive_scan(*inputs), rtol=1e-12, atol=1e-13)


def test_single_step_scan_is_skip_plus_projection():
    rng = np.random.default_rng(1)
    x, delta, A, B, C, D = random_scan_inputs(rng, 1, 2, 3, 1)
    out = scan_recurrence(*(Tensor(a) for a in (x, delta, A, B, C, D))).data
    expected = (delta[..., 0, None] * x[..., 0, None] * B[:, None, :, 0]) @ C[0, :, 0] + D * x[..., 0]
    np.testing.assert_allclose(out[..., 0], expected, rtol=1e-12)


def test_scan_is_linear_in_x_with_frozen_parameters():
    rng = np.random.default_rng(2)
    x1, delta, A, B, C, D = random_scan_inputs(rng, 2, 3, 4, 9)
    x2 = rng.normal(size=x1.shape)
    frozen = [Tensor(a) for a in (delta, A, B, C, D)]

    def run(x):
        return scan_recurrence(Tensor(x), *frozen).data

    np.testing.assert_allclose(run(2.0 * x1 - 3.0 * x2), 2.0 * run(x1) - 3.0 * run(x2), atol=1e-12)


def test_state_updates_grow_linearly_with_length():
    rng = np.random.default_rng(3)
    counts = []
    for length in (8, 16, 32):
        before = SelectiveScan.state_updates
        SelectiveScan.apply(*(Tensor(a) for a in random_scan_inputs(rng, 1, 2, 3, length)))
        counts.append(SelectiveScan.state_updates - before)
    assert counts == [1 * 2 * 3 * 8, 1 * 2 * 3 * 16, 1 * 2 * 3 * 32]


def test_scan_validates_inputs():
    rng = np.random.default_rng(4)
    x, delta, A, B, C, D = random_scan_inputs(rng, 1, 2, 3, 4)
    with pytest.raises(DimensionError):
        SelectiveScan.apply(*(Tensor(a) for a in (x, delta, A, B[:, :, :2], C, D)))
    with pytest.raises(DimensionError):
        SelectiveScan.apply(*(Tensor(a) for a in (x[:, :, :0], delta[:, :, :0], A, B[:, :, :0], C[:, :, :0], D)))
    delta[0, 0, 1] = np.nan
    with pytest.raises(DomainError):
        SelectiveScan.apply(*(Tensor(a) for a in (x, delta, A, B, C, D)))


def test_scan_gradients():
    rng = np.random.default_rng(5)
    inputs = [Tensor(a, requires_grad=True) for a in random_scan_inputs(rng, 2, 2, 3, 5)]
    w = Tensor(rng.normal(size=(2, 2, 5)))
    report = grad_check(lambda *args: (SelectiveScan.apply(*args) * w).sum(), inputs)
    assert report.passed, report.worst


def test_scan_inputs_give_stable_decay():
    rng = np.random.default_rng(6)
    p = ScanParams.create(rng, 4, d_state=3, dt_rank=1)
    delta, A, B, C = scan_inputs(Tensor(rng.normal(size=(1, 4, 7))), p)
    assert delta.shape == (1, 4, 7) and B.shape == (1, 3, 7) and C.shape == (1, 3, 7)
    assert np.all(delta.data > 0)
    assert np.all(A.data < 0)
    np.testing.assert_allclose(A.data[0], [-1.0, -2.0, -3.0])


def test_selective_scan_is_causal():
    rng = np.random.default_rng(7)
    p = ScanParams.create(rng, 3, d_state=2)
    x = rng.normal(size=(1, 3, 10))
    changed = x.copy()
    changed[..., 6:] += 1.0
    a = selective_scan_1d(Tensor(x), p).data
    b = selective_scan_1d(Tensor(changed), p).data
    np.testing.assert_allclose(a[..., :6], b[..., :6], rtol=1e-12, atol=1e-14)


def test_cross_scan_sees_every_position():
    rng = np.random.default_rng(8)
    scans = [ScanParams.create(rng, 2, d_state=2) for _ in range(4)]
    x = rng.normal(size=(1, 2, 4, 5))
    base = cross_scan_2d(Tensor(x), scans).data
    bumped = x.copy()
    bumped[0, :, 2, 3] += 1.0
    delta = np.abs(cross_scan_2d(Tensor(bumped), scans).data - base)
    # four directions reach every pixel from a single perturbed pixel
    assert np.all(delta.sum(axis=1) > 0)
    with pytest.raises(DimensionError):
        cross_scan_2d(Tensor(x), scans[:3])


def test_vss_block_is_residual_and_shape_preserving():
    rng = np.random.default_rng(9)
    p = VssBlockParams.create(rng, 4, d_state=2, expand=2, dt_rank=1)
    x = Tensor(rng.normal(size=(2, 4, 3, 5)))
    out = vss_block(x, p)
    assert out.shape == x.shape
    p.out_proj.data[:] = 0.0
    np.testing.assert_array_equal(vss_block(x, p).data, x.data)
    with pytest.raises(DimensionError):
        vss_block(Tensor(np.zeros((1, 3, 2, 2))), p)
