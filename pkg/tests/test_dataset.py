import numpy as np
import pytest

from stfusion.core.entities import BiTemporalSample, DataError, SynthConfig
from stfusion.core.synthetic import generate_synthetic
from stfusion.utils.dataset import (
    assemble,
    augment,
    crop_size,
    find_triples,
    load_dataset,
    prefetch,
    sample_batch,
    save_dataset,
    split_holdout,
    tile,
    training_patches,
)
from stfusion.utils.image_io import write_image


def make_sample(size=64, name="s"):
    rng = np.random.default_rng([size, sum(map(ord, name))])
    return BiTemporalSample(
        name=name,
        pre=rng.uniform(size=(3, size, size)),
        post=rng.uniform(size=(3, size, size)),
        label=(rng.random((size, size)) < 0.3).astype(np.uint8),
    )


def test_saved_dataset_loads_back(tmp_path):
    samples = generate_synthetic(SynthConfig(size=32, seed=1), 3)
    save_dataset(samples, tmp_path)
    loaded = load_dataset(tmp_path)
    assert [s.name for s in loaded] == sorted(s.name for s in samples)
    for original, back in zip(sorted(samples, key=lambda s: s.name), loaded):
        np.testing.assert_array_equal(back.label, original.label)
        # 8-bit quantization
        np.testing.assert_allclose(back.pre, original.pre, atol=0.5 / 255 + 1e-12)


def test_incomplete_triples_are_skipped(tmp_path):
    save_dataset(generate_synthetic(SynthConfig(size=32), 2), tmp_path)
    write_image(tmp_path / "A" / "orphan.ppm", np.zeros((32, 32, 3), dtype=np.uint8))
    (tmp_path / "B" / "notes.txt").write_text("not an image")
    triples, missing = find_triples(tmp_path)
    assert len(triples) == 2
    assert missing == ["orphan"]


def test_label_files_are_binarized(tmp_path):
    write_image(tmp_path / "A" / "x.ppm", np.zeros((32, 32, 3), dtype=np.uint8))
    write_image(tmp_path / "B" / "x.ppm", np.zeros((32, 32, 3), dtype=np.uint8))
    label = np.zeros((32, 32), dtype=np.uint8)
    label[:, 16:] = 200
    label[:, :2] = 100
    write_image(tmp_path / "label" / "x.pgm", label)
    sample = load_dataset(tmp_path)[0]
    assert sample.label.sum() == 32 * 16
    assert set(np.unique(sample.label)) == {0, 1}


def test_size_mismatch_and_missing_layout(tmp_path):
    write_image(tmp_path / "A" / "x.ppm", np.zeros((32, 32, 3), dtype=np.uint8))
    write_image(tmp_path / "B" / "x.ppm", np.zeros((32, 64, 3), dtype=np.uint8))
    write_image(tmp_path / "label" / "x.pgm", np.zeros((32, 32), dtype=np.uint8))
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nowhere")


def test_tiling_a_1024_image_gives_16_patches():
    sample = BiTemporalSample(
        name="big",
        pre=np.zeros((3, 1024, 1024)),
        post=np.zeros((3, 1024, 1024)),
        label=np.zeros((1024, 1024), dtype=np.uint8),
    )
    patches = tile(sample)
    assert len(patches) == 16
    assert patches[5].name == "big_r1c1"
    assert all(p.size == (256, 256) for p in patches)


def test_assemble_inverts_tile():
    sample = make_sample(64)
    patches = tile(sample, 32)
    np.testing.assert_array_equal(assemble([p.pre for p in patches], 2, 2), sample.pre)
    np.testing.assert_array_equal(assemble([p.label for p in patches], 2, 2), sample.label)
    with pytest.raises(DataError):
        assemble([p.label for p in patches], 3, 2)


def test_augment_transforms_images_and_label_together():
    sample = make_sample(32)
    # the label is a channel of pre, so any geometric mismatch shows
    sample = sample.copy(update={"pre": np.stack([sample.label.astype(float)] * 3)})
    for seed in range(8):
        out = augment(sample, np.random.default_rng(seed))
        np.testing.assert_array_equal(out.pre[0], out.label)
        assert out.label.sum() == sample.label.sum()


def test_batches_depend_only_on_seed_and_iteration():
    samples = [make_sample(64, name=f"s{i}") for i in range(3)]
    a = sample_batch(samples, 4, 32, seed=0, iteration=7, augmentation=True)
    b = sample_batch(samples, 4, 32, seed=0, iteration=7, augmentation=True)
    c = sample_batch(samples, 4, 32, seed=0, iteration=8, augmentation=True)
    assert a.pre.shape == (4, 3, 32, 32) and a.label.shape == (4, 32, 32)
    assert len(a) == 4
    np.testing.assert_array_equal(a.pre, b.pre)
    assert a.names == b.names
    assert not np.array_equal(a.pre, c.pre)


def test_crop_size_rounds_down_to_the_input_multiple():
    assert crop_size([make_sample(64)], 256) == 64
    assert crop_size([make_sample(64)], 48) == 32
    with pytest.raises(DataError):
        crop_size([make_sample(16)], 256)


@pytest.mark.parametrize("workers", [0, 2])
def test_prefetch_preserves_order(workers):
    assert list(prefetch(lambda i: i * i, range(6), workers=workers)) == [0, 1, 4, 9, 16, 25]


def test_holdout_split_is_seeded_and_disjoint():
    samples = [make_sample(32, name=f"s{i}") for i in range(20)]
    train, holdout = split_holdout(samples, 0.1, seed=3)
    assert len(holdout) == 2 and len(train) == 18
    assert not {s.name for s in train} & {s.name for s in holdout}
    assert [s.name for s in split_holdout(samples, 0.1, seed=3)[1]] == [s.name for s in holdout]
    train, holdout = split_holdout(samples[:1], 0.1, seed=3)
    assert len(train) == 1 and holdout == []


def test_training_images_larger_than_a_patch_are_tiled():
    patches = training_patches([make_sample(64, name="big"), make_sample(32, name="small")], size=32)
    assert [p.name for p in patches] == ["big_r0c0", "big_r0c1", "big_r1c0", "big_r1c1", "small"]
    assert all(p.size == (32, 32) for p in patches)


def test_holdout_count_overrides_the_fraction():
    samples = [make_sample(32, name=f"s{i}") for i in range(10)]
    train, holdout = split_holdout(samples, 0.1, seed=0, count=4)
    assert len(train) == 6 and len(holdout) == 4
    train, holdout = split_holdout(samples, 0.1, seed=0, count=0)
    assert len(train) == 10 and holdout == []
    with pytest.raises(DataError):
        split_holdout(samples, 0.1, seed=0, count=10)
