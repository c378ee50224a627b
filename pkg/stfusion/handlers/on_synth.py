from __future__ import annotations

from pathlib import Path

from loguru import logger

from stfusion.core.entities import SynthConfig
from stfusion.core.synthetic import generate_synthetic
from stfusion.utils.dataset import save_dataset


def on_synth(out_dir: str | Path, n: int, cfg: SynthConfig) -> int:
    """Export n synthetic pairs in the A/B/label layout; returns the number of changed pixels."""
    samples = generate_synthetic(cfg, n)
    save_dataset(samples, out_dir)
    changed = sum(int(s.label.sum()) for s in samples)
    total = n * cfg.size * cfg.size
    if total:
        logger.info(f"Change ratio {changed / total:.3%} over {n} pairs")
    return changed
