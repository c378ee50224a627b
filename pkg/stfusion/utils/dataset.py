"""
On-disk bi-temporal datasets laid out as root/{A,B,label}/<name>.<ext>, plus patching and batching.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from loguru import logger
from pydantic import BaseModel, ValidationError

from stfusion.core.entities import BiTemporalSample, DataError
from stfusion.utils.config.server import NUM_WORKERS
from stfusion.utils.image_io import binarize, image_suffixes, read_image, to_chw, to_hwc, write_image

PRE_DIR = "A"
POST_DIR = "B"
LABEL_DIR = "label"
PATCH_SIZE = 256
SIZE_MULTIPLE = 32


class Triple(BaseModel):
    name: str
    pre: Path
    post: Path
    label: Path


class Batch(BaseModel):
    pre: np.ndarray
    post: np.ndarray
    label: np.ndarray
    names: list[str]

    class Config:
        arbitrary_types_allowed = True

    def __len__(self) -> int:
        return len(self.names)


def _by_stem(directory: Path) -> dict[str, Path]:
    suffixes = image_suffixes()
    if not directory.is_dir():
        raise DataError(f"Missing dataset directory {directory}")
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in suffixes}


def find_triples(root: str | Path) -> tuple[list[Triple], list[str]]:
    """Triples matched by file stem, and the names skipped because a counterpart is missing."""
    root = Path(root)
    pre, post, label = (_by_stem(root / d) for d in (PRE_DIR, POST_DIR, LABEL_DIR))
    triples, missing = [], []
    for name in sorted(set(pre) | set(post) | set(label)):
        if name in pre and name in post and name in label:
            triples.append(Triple(name=name, pre=pre[name], post=post[name], label=label[name]))
        else:
            missing.append(name)
    if missing:
        logger.warning(f"Skipping {len(missing)} incomplete triples in {root}: {', '.join(missing)}")
    return triples, missing


def load_triple(triple: Triple) -> BiTemporalSample:
    pre, post, label = read_image(triple.pre), read_image(triple.post), read_image(triple.label)
    sizes = {pre.shape[:2], post.shape[:2], label.shape[:2]}
    if len(sizes) != 1:
        raise DataError(f"{triple.name}: pre, post and label sizes differ: {sorted(sizes)}")
    try:
        return BiTemporalSample(name=triple.name, pre=to_chw(pre), post=to_chw(post), label=binarize(label))
    except ValidationError as e:
        raise DataError(f"{triple.name}: {e}")


def iter_dataset(root: str | Path) -> Iterator[BiTemporalSample]:
    triples, _ = find_triples(root)
    for triple in triples:
        yield load_triple(triple)


def load_dataset(root: str | Path) -> list[BiTemporalSample]:
    samples = list(iter_dataset(root))
    if not samples:
        raise DataError(f"No complete image triples under {root}")
    logger.info(f"Loaded {len(samples)} samples from {root}")
    return samples


def save_dataset(samples: list[BiTemporalSample], root: str | Path) -> None:
    """Write PPM images and 0/255 PGM labels in the layout load_dataset reads."""
    root = Path(root)
    for sample in samples:
        write_image(root / PRE_DIR / f"{sample.name}.ppm", to_hwc(sample.pre))
        write_image(root / POST_DIR / f"{sample.name}.ppm", to_hwc(sample.post))
        write_image(root / LABEL_DIR / f"{sample.name}.pgm", sample.label * np.uint8(255))
    logger.info(f"Wrote {len(samples)} samples to {root}")


def crop(sample: BiTemporalSample, top: int, left: int, size: int, suffix: str = "") -> BiTemporalSample:
    rows, cols = slice(top, top + size), slice(left, left + size)
    return BiTemporalSample(
        name=sample.name + suffix,
        pre=sample.pre[:, rows, cols],
        post=sample.post[:, rows, cols],
        label=sample.label[rows, cols],
    )


def tile(sample: BiTemporalSample, size: int = PATCH_SIZE) -> list[BiTemporalSample]:
    """Non-overlapping size x size patches on a fixed grid, row-major; a ragged border is dropped."""
    h, w = sample.size
    if h < size or w < size:
        raise DataError(f"{sample.name}: {h}x{w} is smaller than the {size}px patch")
    return [
        crop(sample, r * size, c * size, size, suffix=f"_r{r}c{c}")
        for r in range(h // size)
        for c in range(w // size)
    ]


def assemble(patches: list[np.ndarray], rows: int, cols: int) -> np.ndarray:
    """Inverse of tile for (..., P, P) arrays in row-major order."""
    if len(patches) != rows * cols:
        raise DataError(f"Expected {rows * cols} patches, got {len(patches)}")
    return np.concatenate(
        [np.concatenate(patches[r * cols : (r + 1) * cols], axis=-1) for r in range(rows)], axis=-2
    )


def random_crop(sample: BiTemporalSample, size: int, rng: np.random.Generator) -> BiTemporalSample:
    h, w = sample.size
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return crop(sample, top, left, size)


def augment(sample: BiTemporalSample, rng: np.random.Generator) -> BiTemporalSample:
    """Random flips and quarter turns, applied identically to both images and the label."""
    pre, post, label = sample.pre, sample.post, sample.label
    if rng.random() < 0.5:
        pre, post, label = pre[:, :, ::-1], post[:, :, ::-1], label[:, ::-1]
    if rng.random() < 0.5:
        pre, post, label = pre[:, ::-1], post[:, ::-1], label[::-1]
    turns = int(rng.integers(4))
    if turns:
        pre, post = np.rot90(pre, turns, axes=(1, 2)), np.rot90(post, turns, axes=(1, 2))
        label = np.rot90(label, turns)
    return BiTemporalSample(
        name=sample.name,
        pre=np.ascontiguousarray(pre),
        post=np.ascontiguousarray(post),
        label=np.ascontiguousarray(label),
    )


def stack(samples: list[BiTemporalSample]) -> Batch:
    return Batch(
        pre=np.stack([s.pre for s in samples]),
        post=np.stack([s.post for s in samples]),
        label=np.stack([s.label for s in samples]),
        names=[s.name for s in samples],
    )


def crop_size(samples: list[BiTemporalSample], patch_size: int) -> int:
    smallest = min(min(s.size) for s in samples)
    size = min(patch_size, smallest) // SIZE_MULTIPLE * SIZE_MULTIPLE
    if size == 0:
        raise DataError(f"Samples of {smallest}px are smaller than the {SIZE_MULTIPLE}px input multiple")
    return size


def sample_batch(
    samples: list[BiTemporalSample],
    batch_size: int,
    patch_size: int,
    seed: int,
    iteration: int,
    augmentation: bool = False,
) -> Batch:
    """Training batch for one iteration; depends only on (seed, iteration) so resumed runs match."""
    if not samples:
        raise DataError("Cannot sample a batch from an empty dataset")
    rng = np.random.default_rng([seed, iteration])
    chosen = [samples[i] for i in rng.integers(0, len(samples), size=batch_size)]
    size = crop_size(chosen, patch_size)
    patches = []
    for sample in chosen:
        patch = random_crop(sample, size, rng)
        patches.append(augment(patch, rng) if augmentation else patch)
    return stack(patches)


def prefetch(make_batch: Callable[[int], Batch], iterations: range, workers: int = NUM_WORKERS) -> Iterator[Batch]:
    """Yield make_batch(i) for i in order, computing up to `workers` batches ahead on threads."""
    if workers <= 0:
        for i in iterations:
            yield make_batch(i)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = []
        for i in iterations:
            pending.append(pool.submit(make_batch, i))
            if len(pending) > workers:
                yield pending.pop(0).result()
        for future in pending:
            yield future.result()


def training_patches(samples: list[BiTemporalSample], size: int = PATCH_SIZE) -> list[BiTemporalSample]:
    """Images at least `size` on both sides and larger on one are tiled; the rest are kept whole."""
    patches = []
    for sample in samples:
        h, w = sample.size
        if h >= size and w >= size and (h > size or w > size):
            patches.extend(tile(sample, size))
        else:
            patches.append(sample)
    if len(patches) != len(samples):
        logger.info(f"Cut {len(samples)} training images into {len(patches)} patches of {size}px")
    return patches


def split_holdout(
    samples: list[BiTemporalSample], fraction: float, seed: int, count: int | None = None
) -> tuple[list[BiTemporalSample], list[BiTemporalSample]]:
    """Seeded disjoint split; `count` overrides the fraction."""
    if count is not None:
        if count < 0 or (samples and count >= len(samples)):
            raise DataError(f"Cannot hold out {count} of {len(samples)} samples")
        held = count
    elif len(samples) < 2 or fraction <= 0:
        return samples, []
    else:
        held = max(1, int(round(len(samples) * fraction)))
    order = np.random.default_rng(seed).permutation(len(samples))
    held_ids = set(order[:held].tolist())
    train = [s for i, s in enumerate(samples) if i not in held_ids]
    holdout = [s for i, s in enumerate(samples) if i in held_ids]
    return train, holdout
