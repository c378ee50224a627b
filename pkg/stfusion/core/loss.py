"""
Cross-entropy, Dice and binary Lovasz hinge losses on 2-class change logits.

All losses take logits (N, 2, H, W) and a binary mask (N, H, W). P(change) is the
softmax over the two channels, which equals sigmoid(z_change - z_nochange).
"""
from __future__ import annotations

import numpy as np

from stfusion.core.entities import ConfigError, DataError, DimensionError, LossWeights
from stfusion.core.tensor import Tensor, gather, tensor

PROB_EPS = 1e-7
DICE_SMOOTH = 1e-6


def _check_target(logits: Tensor, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise DimensionError(f"Expected (N, 2, H, W) logits, got {logits.shape}")
    if y.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"Mask {y.shape} does not match logits {logits.shape}")
    if not np.isin(y, (0, 1)).all():
        raise DataError("Ground truth mask must be binary")
    return y


def change_margin(logits: Tensor) -> Tensor:
    """Score difference z_change - z_nochange, (N, H, W)."""
    return logits[:, 1] - logits[:, 0]


def change_probability(logits: Tensor) -> Tensor:
    return change_margin(logits).sigmoid()


def cross_entropy(logits: Tensor, y: np.ndarray, eps: float = PROB_EPS) -> Tensor:
    y = _check_target(logits, y)
    p = change_probability(logits).clip(eps, 1.0 - eps)
    target = tensor(y)
    return -(target * p.log() + (1.0 - target) * (1.0 - p).log()).mean()


def dice_loss(prob_change: Tensor, y: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    y = np.asarray(y)
    if prob_change.shape != y.shape:
        raise DimensionError(f"Probabilities {prob_change.shape} and mask {y.shape} differ in shape")
    target = tensor(y)
    intersection = (target * prob_change).sum()
    return 1.0 - (2.0 * intersection + smooth) / (float(y.sum()) + prob_change.sum() + smooth)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Discrete gradient of the Jaccard loss extension for ground truth sorted by descending error."""
    gt_sorted = np.asarray(gt_sorted, dtype=np.float64)
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_hinge_flat(scores: Tensor, labels: np.ndarray) -> Tensor:
    """Lovasz hinge over a flat vector of scores; zero when no pixel is labelled change."""
    labels = np.asarray(labels).reshape(-1)
    if labels.sum() == 0:
        return scores.sum() * 0.0
    signs = 2.0 * labels - 1.0
    errors = 1.0 - scores * tensor(signs)
    # stable sort: ties keep their original order
    perm = np.argsort(-errors.data, kind="stable")
    grad = lovasz_grad(labels[perm])
    errors_sorted = gather(errors, perm).relu()
    return (errors_sorted * tensor(grad)).sum()


def lovasz_loss(logits: Tensor, y: np.ndarray, per_image: bool = True) -> Tensor:
    y = _check_target(logits, y)
    margin = change_margin(logits)
    if not per_image:
        return lovasz_hinge_flat(margin.reshape(-1), y)
    n = margin.shape[0]
    losses = [lovasz_hinge_flat(margin[i].reshape(-1), y[i]) for i in range(n)]
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total * (1.0 / n)


def loss_terms(logits: Tensor, y: np.ndarray, w: LossWeights, per_image: bool = True) -> dict[str, Tensor]:
    """Unweighted loss components that carry a non-zero weight."""
    y = _check_target(logits, y)
    terms = {}
    if w.w_ce:
        terms["ce"] = cross_entropy(logits, y)
    if w.w_lovasz:
        terms["lovasz"] = lovasz_loss(logits, y, per_image=per_image)
    if w.w_dice:
        terms["dice"] = dice_loss(change_probability(logits), y)
    return terms


def combine_terms(terms: dict[str, Tensor], w: LossWeights) -> Tensor:
    weights = {"ce": w.w_ce, "lovasz": w.w_lovasz, "dice": w.w_dice}
    total = None
    for name, term in terms.items():
        weighted = term if weights[name] == 1.0 else term * weights[name]
        total = weighted if total is None else total + weighted
    if total is None:
        raise ConfigError("All loss weights are zero")
    return total


def total_loss(logits: Tensor, y: np.ndarray, w: LossWeights | None = None, per_image: bool = True) -> Tensor:
    w = w or LossWeights()
    return combine_terms(loss_terms(logits, y, w, per_image=per_image), w)
