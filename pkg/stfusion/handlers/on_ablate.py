"""
Component ablation: train and evaluate the model with one component removed at a time.
"""
from __future__ import annotations

import csv
from pathlib import Path

from loguru import logger
from pydantic import BaseModel
from tabulate import tabulate

from stfusion.core.entities import METRIC_COLUMNS, BiTemporalSample, DataError, Metrics, TrainConfig
from stfusion.handlers.on_train import on_train


class AblationRow(BaseModel):
    name: str
    use_diff: bool = True
    use_chn: bool = True
    use_dice: bool = True
    use_ecr: bool = True
    # published full-scale SYSU-CD percentages, reported beside local results
    reference: dict[str, float]

    def toggles(self) -> dict[str, bool]:
        return {"use_diff": self.use_diff, "use_chn": self.use_chn, "use_dice": self.use_dice, "use_ecr": self.use_ecr}


ABLATION_ROWS = [
    AblationRow(name="no_diff", use_diff=False, reference=dict(pre=88.96, rec=80.94, f1=84.76, iou=73.56, oa=93.14)),
    AblationRow(name="no_chn", use_chn=False, reference=dict(pre=88.47, rec=80.40, f1=84.24, iou=72.78, oa=92.91)),
    AblationRow(name="no_dice", use_dice=False, reference=dict(pre=86.19, rec=84.13, f1=85.15, iou=74.13, oa=93.08)),
    AblationRow(name="no_ecr", use_ecr=False, reference=dict(pre=88.00, rec=82.85, f1=85.35, iou=74.40, oa=93.10)),
    AblationRow(name="full", reference=dict(pre=86.14, rec=85.35, f1=85.74, iou=75.04, oa=93.30)),
]

REFERENCE_COLUMNS = ["pre", "rec", "f1", "iou", "oa"]


class AblationResult(BaseModel):
    row: AblationRow
    concat_width: int
    parameter_count: int
    metrics: Metrics

    def csv_values(self) -> list:
        toggles = [int(v) for v in self.row.toggles().values()]
        return [
            self.row.name,
            *toggles,
            self.concat_width,
            self.parameter_count,
            *self.metrics.percentages().values(),
            *(f"{self.row.reference[c]:.2f}" for c in REFERENCE_COLUMNS),
        ]


CSV_HEADERS = [
    "row",
    "diff",
    "chn",
    "dice",
    "ecr",
    "concat_width",
    "parameters",
    *METRIC_COLUMNS,
    *(f"ref_{c}" for c in REFERENCE_COLUMNS),
]


def run_row(
    row: AblationRow,
    base: TrainConfig,
    run_dir: Path,
    train_samples: list[BiTemporalSample],
    holdout: list[BiTemporalSample],
) -> AblationResult:
    cfg = base.copy(update=row.toggles())
    logger.info(f"Ablation row {row.name}: {row.toggles()}")
    result = on_train(cfg, run_dir / row.name, train_samples, holdout, progress=False)
    final = result.evaluations[max(result.evaluations)]
    return AblationResult(
        row=row,
        concat_width=cfg.to_model_config().concat_width,
        parameter_count=result.parameter_count,
        metrics=final,
    )


def on_ablate(
    base: TrainConfig,
    out_csv: str | Path,
    train_samples: list[BiTemporalSample],
    holdout: list[BiTemporalSample],
    rows: list[AblationRow] | None = None,
) -> list[AblationResult]:
    if not holdout:
        raise DataError("Ablation needs a held-out split to report metrics")
    out_csv = Path(out_csv)
    run_dir = out_csv.parent / f"{out_csv.stem}_runs"
    results = [run_row(row, base, run_dir, train_samples, holdout) for row in rows or ABLATION_ROWS]
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with out_csv.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADERS)
        writer.writerows(r.csv_values() for r in results)
    logger.info(f"Wrote ablation table to {out_csv}\n" + tabulate([r.csv_values() for r in results], headers=CSV_HEADERS))
    return results
