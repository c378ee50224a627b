from __future__ import annotations

import contextlib
import sys
from pathlib import Path
from typing import Iterator, Optional

import typer
from loguru import logger

from stfusion.core.entities import (
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    DataError,
    DimensionError,
    NumericError,
    SynthConfig,
)
from stfusion.utils.config.server import LOG_LEVEL

app = typer.Typer(name="stfusion", add_completion=False, help="Bi-temporal change detection with state space fusion.")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


@contextlib.contextmanager
def exit_codes() -> Iterator[None]:
    try:
        yield
    except (ConfigError, CheckpointVersionError) as e:
        logger.error(f"Configuration error: {e}")
        raise typer.Exit(EXIT_CONFIG)
    except (DataError, DimensionError, CheckpointError) as e:
        logger.error(f"Data error: {e}")
        raise typer.Exit(EXIT_DATA)
    except NumericError as e:
        logger.error(f"Numeric failure ({e.source or 'unknown source'}): {e}")
        raise typer.Exit(EXIT_NUMERIC)


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Log at DEBUG level")):
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else LOG_LEVEL)


def _toggle(disabled: bool) -> Optional[bool]:
    # only an explicit --no-x flag overrides the config file
    return False if disabled else None


@app.command()
def train(
    data: Optional[Path] = typer.Option(None, "--data", help="Dataset root with A/, B/ and label/"),
    synth: Optional[int] = typer.Option(None, "--synth", help="Train on N synthetic pairs instead of a dataset"),
    synth_size: int = typer.Option(64, "--synth-size", help="Side of the synthetic images"),
    holdout: Optional[int] = typer.Option(None, "--holdout", help="Held-out sample count (default: a tenth)"),
    out: Path = typer.Option(Path("runs/train"), "--out", help="Run directory"),
    config: Optional[Path] = typer.Option(None, "--config", help="Flat key = value or YAML config file"),
    preset: Optional[str] = typer.Option(None, "--preset", help="tiny, small or base"),
    lr: Optional[float] = typer.Option(None, "--lr"),
    wd: Optional[float] = typer.Option(None, "--wd"),
    batch: Optional[int] = typer.Option(None, "--batch"),
    iters: Optional[int] = typer.Option(None, "--iters"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    no_diff: bool = typer.Option(False, "--no-diff", help="Disable the difference mechanism"),
    no_chn: bool = typer.Option(False, "--no-chn", help="Disable the channel-cross mechanism"),
    no_dice: bool = typer.Option(False, "--no-dice", help="Drop the Dice term from the loss"),
    no_ecr: bool = typer.Option(False, "--no-ecr", help="Plain 1x1 projections and no CBAM"),
    loss_weights: Optional[str] = typer.Option(None, "--loss-weights", help="w_ce,w_lovasz,w_dice"),
    precision: Optional[str] = typer.Option(None, "--precision", help="float32 or float64"),
    eval_every: Optional[int] = typer.Option(None, "--eval-every"),
    patch_size: Optional[int] = typer.Option(None, "--patch-size"),
    augment: Optional[bool] = typer.Option(None, "--augment/--no-augment"),
    decoder_width: Optional[int] = typer.Option(None, "--decoder-width"),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Continue from a checkpoint"),
):
    """Train a change detector and write best/last checkpoints to the run directory."""
    from stfusion.handlers.on_train import on_train, prepare_samples
    from stfusion.utils.config.client import resolve_train_config

    with exit_codes():
        cfg = resolve_train_config(
            config,
            dict(
                preset=preset,
                lr=lr,
                weight_decay=wd,
                batch_size=batch,
                iterations=iters,
                seed=seed,
                use_diff=_toggle(no_diff),
                use_chn=_toggle(no_chn),
                use_dice=_toggle(no_dice),
                use_ecr=_toggle(no_ecr),
                loss_weights=loss_weights,
                precision=precision,
                eval_every=eval_every,
                patch_size=patch_size,
                augment=augment,
                decoder_width=decoder_width,
            ),
        )
        train_samples, held = prepare_samples(data, synth, synth_size, cfg.seed, holdout)
        result = on_train(cfg, out, train_samples, held, resume=resume)
    if result.best_f1 is not None:
        typer.echo(f"best F1 {result.best_f1:.4f} -> {result.best_checkpoint}")
    typer.echo(f"last checkpoint -> {result.last_checkpoint}")


@app.command("eval")
def evaluate(
    ckpt: Path = typer.Option(..., "--ckpt"),
    data: Path = typer.Option(..., "--data"),
    render: Optional[Path] = typer.Option(None, "--render", help="Write colour change maps here"),
):
    """Evaluate a checkpoint on full-resolution images."""
    from stfusion.handlers.on_eval import on_eval

    with exit_codes():
        result = on_eval(ckpt, data, render)
    typer.echo(result.metrics.report())


@app.command()
def infer(
    ckpt: Path = typer.Option(..., "--ckpt"),
    pre: Path = typer.Option(..., "--pre"),
    post: Path = typer.Option(..., "--post"),
    out: Path = typer.Option(..., "--out"),
):
    """Predict the change mask of one image pair."""
    from stfusion.handlers.on_infer import on_infer

    with exit_codes():
        on_infer(ckpt, pre, post, out)


@app.command()
def gradcheck(
    module: str = typer.Option("all", "--module", help="all, tensor, ssm, loss or model"),
    seed: int = typer.Option(0, "--seed"),
):
    """Compare analytic gradients with central differences in 64-bit."""
    from stfusion.handlers.on_gradcheck import on_gradcheck

    with exit_codes():
        passed = on_gradcheck(module, seed)
    if not passed:
        raise typer.Exit(EXIT_NUMERIC)


@app.command()
def synth(
    out: Path = typer.Option(..., "--out"),
    n: int = typer.Option(..., "--n", help="Number of pairs"),
    size: int = typer.Option(64, "--size"),
    seed: int = typer.Option(0, "--seed"),
):
    """Write a synthetic dataset in the A/B/label layout."""
    from stfusion.handlers.on_synth import on_synth

    with exit_codes():
        cfg = SynthConfig(size=size, seed=seed)
        changed = on_synth(out, n, cfg)
    typer.echo(f"{n} pairs, {changed} changed pixels -> {out}")


@app.command()
def ablate(
    data: Optional[Path] = typer.Option(None, "--data"),
    synth: Optional[int] = typer.Option(None, "--synth"),
    synth_size: int = typer.Option(64, "--synth-size"),
    holdout: Optional[int] = typer.Option(None, "--holdout"),
    out: Path = typer.Option(Path("runs/ablation.csv"), "--out", help="CSV with one row per ablation"),
    config: Optional[Path] = typer.Option(None, "--config"),
    iters: Optional[int] = typer.Option(None, "--iters"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    precision: Optional[str] = typer.Option(None, "--precision"),
    decoder_width: Optional[int] = typer.Option(None, "--decoder-width"),
):
    """Train the full model and each single-component ablation, then tabulate the metrics."""
    from stfusion.handlers.on_ablate import on_ablate
    from stfusion.handlers.on_train import prepare_samples
    from stfusion.utils.config.client import resolve_train_config

    with exit_codes():
        base = resolve_train_config(
            config,
            dict(iterations=iters, seed=seed, precision=precision, decoder_width=decoder_width),
        )
        train_samples, held = prepare_samples(data, synth, synth_size, base.seed, holdout)
        on_ablate(base, out, train_samples, held)
    typer.echo(f"ablation table -> {out}")


if __name__ == "__main__":
    app()
