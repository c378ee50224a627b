import numpy as np
import pytest

from stfusion.core.entities import ALL_MECHANISMS, DimensionError, FusionKind
from stfusion.core.fusion import fold_back, fuse, fused_channels, unfuse
from stfusion.core.tensor import Tensor


def random_pair(rng, shape):
    return Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=shape))


@pytest.mark.parametrize("kind", [k for k in ALL_MECHANISMS if k != FusionKind.difference])
def test_invertible_layouts_reconstruct_exactly(kind):
    rng = np.random.default_rng(0)
    for _ in range(10):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=4))
        f1, f2 = random_pair(rng, shape)
        r1, r2 = unfuse(kind, fuse(kind, f1, f2))
        np.testing.assert_array_equal(r1.data, f1.data)
        np.testing.assert_array_equal(r2.data, f2.data)


def test_layout_shapes():
    rng = np.random.default_rng(1)
    f1, f2 = random_pair(rng, (2, 3, 4, 5))
    assert fuse(FusionKind.sequential, f1, f2).shape == (2, 3, 4, 10)
    assert fuse(FusionKind.cross, f1, f2).shape == (2, 3, 4, 10)
    assert fuse(FusionKind.parallel, f1, f2).shape == (2, 6, 4, 5)
    assert fuse(FusionKind.channel_cross, f1, f2).shape == (2, 6, 4, 5)
    assert fuse(FusionKind.difference, f1, f2).shape == (2, 3, 4, 5)
    assert [fused_channels(k, 3) for k in ALL_MECHANISMS] == [3, 3, 6, 6, 3]


def test_sequential_puts_post_after_pre_in_each_row():
    f1 = Tensor(np.full((1, 1, 2, 2), 1.0))
    f2 = Tensor(np.full((1, 1, 2, 2), 2.0))
    np.testing.assert_array_equal(fuse("sequential", f1, f2).data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])
    np.testing.assert_array_equal(fuse("cross", f1, f2).data[0, 0], [[1, 2, 1, 2], [1, 2, 1, 2]])


def test_channel_cross_alternates_channels():
    f1 = Tensor(np.arange(2.0).reshape(1, 2, 1, 1))
    f2 = Tensor(np.arange(10.0, 12.0).reshape(1, 2, 1, 1))
    np.testing.assert_array_equal(fuse("channel_cross", f1, f2).data.ravel(), [0, 10, 1, 11])
    np.testing.assert_array_equal(fuse("parallel", f1, f2).data.ravel(), [0, 1, 10, 11])


def test_difference_is_symmetric():
    rng = np.random.default_rng(2)
    f1, f2 = random_pair(rng, (2, 3, 4, 4))
    np.testing.assert_array_equal(fuse("difference", f1, f2).data, fuse("difference", f2, f1).data)
    assert np.all(fuse("difference", f1, f1).data == 0)
    with pytest.raises(DimensionError):
        unfuse("difference", f1)


def test_mismatched_pair_is_rejected():
    rng = np.random.default_rng(3)
    with pytest.raises(DimensionError):
        fuse("parallel", Tensor(rng.normal(size=(1, 2, 3, 3))), Tensor(rng.normal(size=(1, 2, 3, 4))))


def test_fold_back_sums_temporal_halves():
    rng = np.random.default_rng(4)
    f1, f2 = random_pair(rng, (1, 2, 3, 3))
    for kind in (FusionKind.sequential, FusionKind.cross):
        np.testing.assert_allclose(fold_back(fuse(kind, f1, f2), kind).data, f1.data + f2.data)
    with pytest.raises(DimensionError):
        fold_back(fuse("parallel", f1, f2), "parallel")
    with pytest.raises(DimensionError):
        fold_back(Tensor(np.zeros((1, 2, 3, 5))), "sequential")
