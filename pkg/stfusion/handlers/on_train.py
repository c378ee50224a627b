"""
Training loop: seeded batches, total loss, backward, AdamW, periodic held-out evaluation
and best/last checkpoints.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel
from tqdm import tqdm

from stfusion.core.entities import (
    BiTemporalSample,
    ConfigError,
    DataError,
    Metrics,
    NumericError,
    SynthConfig,
    TrainConfig,
)
from stfusion.core.loss import combine_terms, loss_terms
from stfusion.core.model import ChangeDetector
from stfusion.core.optim import AdamW, AdamWConfig
from stfusion.core.synthetic import generate_synthetic
from stfusion.core.tensor import backward, default_dtype, tensor
from stfusion.handlers.on_eval import evaluate_samples
from stfusion.utils.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from stfusion.utils.config.server import BEST_CHECKPOINT_NAME, LAST_CHECKPOINT_NAME
from stfusion.utils.dataset import Batch, load_dataset, prefetch, sample_batch, split_holdout, training_patches
from stfusion.utils.run_logger import RunLogger

HOLDOUT_FRACTION = 0.1


class TrainResult(BaseModel):
    losses: list[float]
    evaluations: dict[int, Metrics] = {}
    best_f1: float | None = None
    best_checkpoint: Path | None = None
    last_checkpoint: Path
    parameter_count: int


def prepare_samples(
    data_dir: str | Path | None,
    synth_count: int | None,
    synth_size: int,
    seed: int,
    holdout: int | None = None,
) -> tuple[list[BiTemporalSample], list[BiTemporalSample]]:
    """
    Training and held-out samples from a dataset directory or the synthetic generator.
    `holdout` fixes the held-out count; otherwise a tenth of the data (at least one sample) is held out.
    Training images larger than a patch are cut into non-overlapping patches; held-out images stay whole.
    """
    if holdout is not None and holdout < 0:
        raise ConfigError(f"Held-out count must be non-negative, got {holdout}")
    if data_dir is not None:
        train, held = split_holdout(load_dataset(data_dir), HOLDOUT_FRACTION, seed, count=holdout)
        return training_patches(train), held
    if not synth_count:
        raise DataError("Either a dataset directory or a synthetic sample count is required")
    synth = SynthConfig(size=synth_size, seed=seed)
    holdout_count = holdout if holdout is not None else max(1, int(round(synth_count * HOLDOUT_FRACTION)))
    return generate_synthetic(synth, synth_count), generate_synthetic(synth, holdout_count, start=synth_count)


def _previous_best(run_logger: RunLogger, best_path: Path, start: int) -> float | None:
    # best F1 recorded in this run directory up to the resume point
    if not best_path.exists():
        return None
    scores = [r["f1"] for r in run_logger.read() if r.get("event") == "eval" and r["iteration"] <= start]
    return max(scores) if scores else None


def _dump_nonfinite(out_dir: Path, iteration: int, batch: Batch, terms: dict[str, float]) -> Path:
    path = out_dir / f"nonfinite_{iteration:06d}.json"
    path.write_text(json.dumps({"iteration": iteration, "names": batch.names, "terms": terms}, indent=2))
    np.savez(out_dir / f"nonfinite_{iteration:06d}.npz", pre=batch.pre, post=batch.post, label=batch.label)
    return path


def on_train(
    cfg: TrainConfig,
    out_dir: str | Path,
    train_samples: list[BiTemporalSample],
    holdout: list[BiTemporalSample] | None = None,
    resume: str | Path | None = None,
    progress: bool = True,
) -> TrainResult:
    if not train_samples:
        raise DataError("Training set is empty")
    out_dir = Path(out_dir)
    holdout = holdout or []
    with default_dtype(cfg.precision):
        start = 0
        optimizer_state = None
        if resume is not None:
            ckpt = load_checkpoint(resume)
            model = ckpt.restore_model()
            optimizer_state = ckpt.optimizer
            start = ckpt.iteration
            if ckpt.model_cfg != cfg.to_model_config():
                logger.warning("Resuming with the checkpoint's model configuration, which differs from the requested one")
            logger.info(f"Resuming from {resume} at iteration {start}")
        else:
            model = ChangeDetector.create(cfg.to_model_config(), seed=cfg.seed)
        params = dict(model.named_parameters())
        optimizer = AdamW(
            params,
            AdamWConfig(lr=cfg.lr, weight_decay=cfg.weight_decay, betas=cfg.betas, eps=cfg.eps),
            state=optimizer_state,
        )
        weights = cfg.effective_loss_weights()
        run_logger = RunLogger(out_dir, data={"preset": cfg.preset}, resume=resume is not None)
        (out_dir / "config.yaml").write_text(cfg.to_yaml())
        logger.info(
            f"Training {model.parameter_count()} parameters for iterations {start}..{cfg.iterations} "
            f"on {len(train_samples)} samples ({len(holdout)} held out)"
        )

        def make_batch(iteration: int) -> Batch:
            return sample_batch(train_samples, cfg.batch_size, cfg.patch_size, cfg.seed, iteration, cfg.augment)

        losses: list[float] = []
        evaluations: dict[int, Metrics] = {}
        best_path = out_dir / BEST_CHECKPOINT_NAME
        best_f1 = _previous_best(run_logger, best_path, start) if resume is not None else None
        if best_f1 is None:
            best_path = None
        else:
            logger.info(f"Keeping {best_path} (held-out F1 {best_f1:.4f}) unless a later evaluation beats it")
        iterations = range(start, cfg.iterations)
        bar = tqdm(prefetch(make_batch, iterations), total=len(iterations), desc="train", disable=not progress)
        for iteration, batch in zip(iterations, bar):
            logits = model(tensor(batch.pre), tensor(batch.post))
            terms = loss_terms(logits, batch.label, weights, per_image=cfg.lovasz_per_image)
            loss = combine_terms(terms, weights)
            value = loss.item()
            term_values = {name: t.item() for name, t in terms.items()}
            if not math.isfinite(value):
                dump = _dump_nonfinite(out_dir, iteration, batch, term_values)
                logger.error(f"Non-finite loss at iteration {iteration} (batch {batch.names}); dumped to {dump}")
                raise NumericError(f"Non-finite loss {value} at iteration {iteration}", source=f"batch {iteration}")
            optimizer.zero_grad()
            backward(loss)
            optimizer.step()
            losses.append(value)
            run_logger.add({"event": "train", "iteration": iteration, "loss": value, **term_values})
            bar.set_postfix(loss=f"{value:.4f}")

            done = iteration + 1
            if holdout and (done % cfg.eval_every == 0 or done == cfg.iterations):
                metrics = evaluate_samples(model, holdout).metrics
                evaluations[done] = metrics
                run_logger.add_metrics(done, metrics)
                logger.info(f"Iteration {done}: held-out F1 {metrics.f1:.4f}, IoU {metrics.iou:.4f}")
                if best_f1 is None or metrics.f1 > best_f1:
                    best_f1 = metrics.f1
                    best_path = out_dir / BEST_CHECKPOINT_NAME
                    save_checkpoint(best_path, Checkpoint.from_model(model, cfg, optimizer.state, done))

        last_path = out_dir / LAST_CHECKPOINT_NAME
        save_checkpoint(last_path, Checkpoint.from_model(model, cfg, optimizer.state, max(start, cfg.iterations)))
    return TrainResult(
        losses=losses,
        evaluations=evaluations,
        best_f1=best_f1,
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        parameter_count=model.parameter_count(),
    )
