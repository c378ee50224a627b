from __future__ import annotations

import numpy as np
from loguru import logger
from tabulate import tabulate

from stfusion.core.entities import METRIC_COLUMNS, ConfusionCounts, ContractError, DataError, DimensionError, Metrics


def _as_binary(mask, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise DataError(f"{name} mask is not binary")
    return mask.astype(bool)


def confusion(pred, truth) -> ConfusionCounts:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"Prediction {pred.shape} and ground truth {truth.shape} differ in shape")
    p = _as_binary(pred, "prediction")
    t = _as_binary(truth, "ground truth")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def _ratio(num: float, den: float, name: str, undefined: list[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def compute_metrics(c: ConfusionCounts) -> Metrics:
    total = c.total
    if total == 0:
        raise ContractError("Cannot compute metrics from an empty confusion matrix")
    undefined: list[str] = []
    pre = _ratio(c.tp, c.tp + c.fp, "pre", undefined)
    rec = _ratio(c.tp, c.tp + c.fn, "rec", undefined)
    f1 = _ratio(2 * pre * rec, pre + rec, "f1", undefined)
    iou = _ratio(c.tp, c.tp + c.fp + c.fn, "iou", undefined)
    oa = (c.tp + c.tn) / total
    # float arithmetic avoids overflow on large pixel counts
    pe = (float(c.tp + c.fp) * float(c.tp + c.fn) + float(c.fn + c.tn) * float(c.fp + c.tn)) / float(total) ** 2
    kc = _ratio(oa - pe, 1.0 - pe, "kc", undefined)
    metrics = Metrics(pre=pre, rec=rec, f1=f1, iou=iou, oa=oa, kc=kc, undefined=undefined)
    if undefined:
        logger.debug(f"Zero denominators for {undefined} with counts {c.dict()}")
    return metrics


def csv_header() -> str:
    return ",".join(METRIC_COLUMNS)


def csv_row(m: Metrics) -> str:
    return ",".join(m.percentages().values())


def metrics_table(rows: dict[str, Metrics]) -> str:
    return tabulate(
        [[name, *m.percentages().values()] for name, m in rows.items()],
        headers=["run", *(c.upper() for c in METRIC_COLUMNS)],
        tablefmt="github",
    )
