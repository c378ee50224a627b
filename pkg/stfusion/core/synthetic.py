"""
Seeded synthetic bi-temporal scenes.

A scene is a smooth background with non-overlapping rectangles and ellipses. The post-event
image removes, recolours or adds shapes, then applies a global illumination shift and pixel
noise. The label is the union of the footprints of changed shapes; illumination and noise
never enter it.
"""
from __future__ import annotations

from typing import Literal

import numpy as np
from loguru import logger
from pydantic import BaseModel

from stfusion.core.entities import BiTemporalSample, ConfigError, SynthConfig

SIZE_MULTIPLE = 32
PLACEMENT_ATTEMPTS = 50
MIN_RECOLOUR = 0.2


class Shape(BaseModel):
    kind: Literal["rect", "ellipse"]
    top: int
    left: int
    height: int
    width: int
    colour: tuple[float, float, float]

    def footprint(self, size: int) -> np.ndarray:
        mask = np.zeros((size, size), dtype=bool)
        rows = slice(self.top, self.top + self.height)
        cols = slice(self.left, self.left + self.width)
        if self.kind == "rect":
            mask[rows, cols] = True
            return mask
        yy, xx = np.mgrid[0 : self.height, 0 : self.width]
        cy, cx = (self.height - 1) / 2, (self.width - 1) / 2
        inside = ((yy - cy) / (self.height / 2)) ** 2 + ((xx - cx) / (self.width / 2)) ** 2 <= 1.0
        mask[rows, cols] = inside
        return mask


class Scene(BaseModel):
    pre_shapes: list[Shape]
    post_shapes: list[Shape]
    added: list[Shape] = []
    removed: list[Shape] = []
    altered: list[Shape] = []

    @property
    def changed(self) -> list[Shape]:
        return self.added + self.removed + self.altered


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.15, 0.45, size=(3, 1, 1))
    slope = rng.uniform(-0.1, 0.1, size=(3, 2))
    ramp = np.linspace(0.0, 1.0, size)
    return base + slope[:, 0, None, None] * ramp[None, :, None] + slope[:, 1, None, None] * ramp[None, None, :]


def _random_colour(rng: np.random.Generator) -> tuple[float, float, float]:
    return tuple(float(c) for c in rng.uniform(0.55, 1.0, size=3))


def _recolour(rng: np.random.Generator, colour: tuple[float, float, float]) -> tuple[float, float, float]:
    candidate = list(_random_colour(rng))
    if max(abs(a - b) for a, b in zip(candidate, colour)) >= MIN_RECOLOUR:
        return tuple(candidate)
    # push one channel to the far end of the colour range
    channel = int(np.argmax([abs(c - 0.775) for c in colour]))
    candidate[channel] = 0.55 if colour[channel] >= 0.775 else 1.0
    return tuple(candidate)


def _place(rng: np.random.Generator, size: int, occupied: np.ndarray) -> Shape | None:
    low, high = max(2, size // 8), max(3, size // 4)
    for _ in range(PLACEMENT_ATTEMPTS):
        height, width = (int(v) for v in rng.integers(low, high + 1, size=2))
        top = int(rng.integers(0, size - height + 1))
        left = int(rng.integers(0, size - width + 1))
        # one pixel of clearance keeps footprints disjoint
        if occupied[max(0, top - 1) : top + height + 1, max(0, left - 1) : left + width + 1].any():
            continue
        kind = "rect" if rng.random() < 0.5 else "ellipse"
        shape = Shape(kind=kind, top=top, left=left, height=height, width=width, colour=_random_colour(rng))
        occupied[top : top + height, left : left + width] = True
        return shape
    return None


def generate_scene(rng: np.random.Generator, cfg: SynthConfig) -> Scene:
    size = cfg.size
    occupied = np.zeros((size, size), dtype=bool)
    count = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    pre_shapes = [s for s in (_place(rng, size, occupied) for _ in range(count)) if s is not None]
    post_shapes, removed, altered = [], [], []
    for shape in pre_shapes:
        event = rng.random()
        if event < cfg.p_remove:
            removed.append(shape)
        elif event < cfg.p_remove + cfg.p_alter:
            changed = shape.copy(update={"colour": _recolour(rng, shape.colour)})
            altered.append(changed)
            post_shapes.append(changed)
        else:
            post_shapes.append(shape)
    added = []
    for _ in range(cfg.max_shapes):
        if rng.random() < cfg.p_add:
            shape = _place(rng, size, occupied)
            if shape is not None:
                added.append(shape)
                post_shapes.append(shape)
    return Scene(pre_shapes=pre_shapes, post_shapes=post_shapes, added=added, removed=removed, altered=altered)


def render(background: np.ndarray, shapes: list[Shape]) -> np.ndarray:
    image = background.copy()
    size = background.shape[1]
    for shape in shapes:
        mask = shape.footprint(size)
        image[:, mask] = np.asarray(shape.colour)[:, None]
    return image


def change_label(scene: Scene, size: int) -> np.ndarray:
    label = np.zeros((size, size), dtype=np.uint8)
    for shape in scene.changed:
        label[shape.footprint(size)] = 1
    return label


def generate_sample(cfg: SynthConfig, index: int) -> tuple[BiTemporalSample, Scene]:
    """Sample `index` of the stream seeded by cfg.seed; independent of every other index."""
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.size
    background = _background(rng, size)
    scene = generate_scene(rng, cfg)
    pre = render(background, scene.pre_shapes)
    post = render(background, scene.post_shapes)
    if cfg.illumination:
        post = post + rng.uniform(-cfg.illumination, cfg.illumination)
    if cfg.noise:
        pre = pre + rng.normal(0.0, cfg.noise, size=pre.shape)
        post = post + rng.normal(0.0, cfg.noise, size=post.shape)
    sample = BiTemporalSample(
        name=f"synth_{cfg.seed}_{index:05d}",
        pre=np.clip(pre, 0.0, 1.0),
        post=np.clip(post, 0.0, 1.0),
        label=change_label(scene, size),
    )
    return sample, scene


def generate_synthetic(cfg: SynthConfig, n: int, start: int = 0) -> list[BiTemporalSample]:
    if cfg.size % SIZE_MULTIPLE:
        raise ConfigError(f"Synthetic image size {cfg.size} is not divisible by {SIZE_MULTIPLE}")
    if n < 0:
        raise ConfigError(f"Cannot generate {n} samples")
    samples = [generate_sample(cfg, index)[0] for index in range(start, start + n)]
    changed = sum(int(s.label.sum()) for s in samples)
    logger.info(f"Generated {n} synthetic pairs of {cfg.size}x{cfg.size}, {changed} changed pixels in total")
    return samples
