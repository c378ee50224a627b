from __future__ import annotations

from pathlib import Path

import numpy as np
from loguru import logger

from stfusion.core.entities import DataError
from stfusion.core.tensor import default_dtype
from stfusion.handlers.on_eval import predict_pair
from stfusion.utils.checkpoint import load_checkpoint
from stfusion.utils.image_io import read_image, to_chw, write_image
from stfusion.utils.render import render_prediction


def on_infer(ckpt_path: str | Path, pre_path: str | Path, post_path: str | Path, out_path: str | Path) -> np.ndarray:
    ckpt = load_checkpoint(ckpt_path)
    pre, post = read_image(pre_path), read_image(post_path)
    if pre.shape[:2] != post.shape[:2]:
        raise DataError(f"Pre-event image is {pre.shape[:2]}, post-event image is {post.shape[:2]}")
    dtype = next(iter(ckpt.params.values())).dtype
    with default_dtype(dtype):
        model = ckpt.restore_model()
        mask = predict_pair(model, to_chw(pre), to_chw(post))
    write_image(out_path, render_prediction(mask))
    logger.info(f"Wrote change mask to {out_path}: {int(mask.sum())} of {mask.size} pixels changed")
    return mask
