"""
Full-resolution evaluation of a checkpoint on a dataset, with optional change-map rendering.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel
from tqdm import tqdm

from stfusion.core.entities import BiTemporalSample, ConfusionCounts, Metrics
from stfusion.core.metrics import compute_metrics, confusion, metrics_table
from stfusion.core.model import ChangeDetector
from stfusion.core.tensor import default_dtype
from stfusion.utils.checkpoint import load_checkpoint
from stfusion.utils.dataset import PATCH_SIZE, assemble, load_dataset, tile
from stfusion.utils.image_io import write_image
from stfusion.utils.render import render_change_map


class EvalResult(BaseModel):
    counts: ConfusionCounts
    metrics: Metrics
    samples: int
    rendered: list[Path] = []


def predict_pair(model: ChangeDetector, pre: np.ndarray, post: np.ndarray, patch: int = PATCH_SIZE) -> np.ndarray:
    """
    (H, W) change mask for one (3, H, W) pair. Images that are whole multiples of `patch` and larger
    than it are predicted patch by patch and reassembled; anything else goes through padded inference.
    """
    h, w = pre.shape[1:]
    if h % patch or w % patch or (h, w) == (patch, patch):
        return model.predict(pre[None], post[None])[0]
    pair = BiTemporalSample(name="pair", pre=pre, post=post, label=np.zeros((h, w), dtype=np.uint8))
    masks = [model.predict(p.pre[None], p.post[None])[0] for p in tile(pair, patch)]
    return assemble(masks, h // patch, w // patch)


def evaluate_samples(
    model: ChangeDetector,
    samples: list[BiTemporalSample],
    render_dir: str | Path | None = None,
    progress: bool = False,
) -> EvalResult:
    counts = ConfusionCounts()
    rendered = []
    for sample in tqdm(samples, desc="eval", disable=not progress):
        pred = predict_pair(model, sample.pre, sample.post)
        counts = counts + confusion(pred, sample.label)
        if render_dir is not None:
            path = Path(render_dir) / f"{sample.name}_cmap.ppm"
            write_image(path, render_change_map(pred, sample.label))
            rendered.append(path)
    return EvalResult(counts=counts, metrics=compute_metrics(counts), samples=len(samples), rendered=rendered)


def on_eval(ckpt_path: str | Path, data_dir: str | Path, render_dir: str | Path | None = None) -> EvalResult:
    ckpt = load_checkpoint(ckpt_path)
    dtype = next(iter(ckpt.params.values())).dtype if ckpt.params else np.float32
    with default_dtype(dtype):
        model = ckpt.restore_model()
        samples = load_dataset(data_dir)
        logger.info(f"Evaluating {ckpt_path} on {len(samples)} full-resolution samples")
        result = evaluate_samples(model, samples, render_dir=render_dir, progress=True)
    logger.info(f"Confusion counts: {result.counts.dict()}")
    logger.info("\n" + metrics_table({Path(ckpt_path).name: result.metrics}))
    if result.rendered:
        logger.info(f"Rendered {len(result.rendered)} change maps to {render_dir}")
    return result
