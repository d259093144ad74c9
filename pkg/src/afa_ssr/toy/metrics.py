"""Segmentation and boundary metrics."""

from __future__ import annotations

import numpy as np

__all__ = ["confusion_matrix", "evaluate_miou", "miou_from_confusion", "evaluate_boundary_f1"]


def confusion_matrix(pred, labels, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes):
        raise ValueError(f"predictions must lie in [0, {num_classes})")
    return np.bincount(labels * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def miou_from_confusion(cm: np.ndarray):
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    iou = np.full(cm.shape[0], np.nan)
    iou[present] = tp[present] / union[present]
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return iou, mean


def evaluate_miou(pred, labels, num_classes: int):
    """Per-class IoU and their mean.

    Classes absent from both prediction and labels get NaN and are left
    out of the mean.
    """
    return miou_from_confusion(confusion_matrix(pred, labels, num_classes))


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    # Chebyshev-ball dilation over the last two axes
    if radius <= 0:
        return mask.copy()
    h, w = mask.shape[-2:]
    pad = [(0, 0)] * (mask.ndim - 2) + [(radius, radius), (radius, radius)]
    padded = np.pad(mask, pad)
    out = np.zeros_like(mask)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out |= padded[..., dy : dy + h, dx : dx + w]
    return out


def evaluate_boundary_f1(prob, targets, threshold: float = 0.5, radius: int = 1):
    """Tolerance-radius boundary precision, recall and F1.

    A predicted boundary pixel is correct if a target pixel lies within
    ``radius`` (Chebyshev distance); recall is scored the same way in
    reverse. Returns ``(precision, recall, f1)``; an empty side scores 0
    unless both sides are empty, which scores 1.
    """
    pred = np.asarray(prob) >= threshold
    tgt = np.asarray(targets).astype(bool)
    n_pred, n_tgt = int(pred.sum()), int(tgt.sum())
    if n_pred == 0 and n_tgt == 0:
        return 1.0, 1.0, 1.0
    precision = float((pred & _dilate(tgt, radius)).sum() / n_pred) if n_pred else 0.0
    recall = float((tgt & _dilate(pred, radius)).sum() / n_tgt) if n_tgt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1
