from __future__ import annotations

import numpy as np

from stfusion.core.entities import DimensionError

WHITE = (255, 255, 255)
BLACK = (0, 0, 0)
RED = (255, 0, 0)
GREEN = (0, 255, 0)


def render_change_map(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8: true positives white, true negatives black, false positives red, false negatives green."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise DimensionError(f"Cannot render prediction {pred.shape} against ground truth {truth.shape}")
    image = np.zeros(pred.shape + (3,), dtype=np.uint8)
    image[pred & truth] = WHITE
    image[pred & ~truth] = RED
    image[~pred & truth] = GREEN
    return image


def render_prediction(pred: np.ndarray) -> np.ndarray:
    """Change mask alone: change white, no change black."""
    pred = np.asarray(pred).astype(bool)
    return np.where(pred[:, :, None], np.uint8(255), np.uint8(0)).repeat(3, axis=2).astype(np.uint8)
