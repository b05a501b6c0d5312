"""Dual-stage class-weighted cross-entropy and segmentation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import Tensor, add, mul


def dynamic_class_weights(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Inverse-frequency weights ``N / (N_c * K)``; classes absent from the batch get weight 0."""
    labels = np.asarray(labels)
    counts = np.bincount(labels.ravel(), minlength=num_classes)[:num_classes].astype(np.float64)
    weights = np.zeros(num_classes)
    seen = counts > 0
    weights[seen] = labels.size / (counts[seen] * num_classes)
    return weights


def weighted_ce(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Class-weighted cross-entropy averaged over pixels; weights default to the batch's dynamic weights."""
    K = logits.shape[-3]
    if weights is None:
        weights = dynamic_class_weights(labels, K)
    return F.weighted_cross_entropy(logits, labels, weights)


@dataclass
class LossTerms:
    total: Tensor
    final: Tensor
    aux: Tensor


def composite_loss(final_logits: Tensor, init_logits: Tensor, labels: np.ndarray, aux_weight: float = 0.4) -> LossTerms:
    """``L_ce(final) + aux_weight * L_ce(upsampled initial)`` against full-resolution labels."""
    H, W = np.asarray(labels).shape[-2:]
    if init_logits.shape[-2:] != (H, W):
        init_logits = F.bilinear_upsample(init_logits, H, W)
    final = weighted_ce(final_logits, labels)
    aux = weighted_ce(init_logits, labels)
    return LossTerms(add(final, mul(aux, aux_weight)), final, aux)


# -- metrics -------------------------------------------------------------------------

@dataclass
class MetricReport:
    accuracy: float
    iou: np.ndarray
    dice: np.ndarray
    mean_iou: float
    mean_dice: float
    confusion: np.ndarray  # rows: ground truth, columns: prediction
    valid: np.ndarray  # classes occurring in prediction or ground truth

    def to_dict(self) -> dict:
        """Flat key/value form: accuracy, miou, dice, per_class.{c}.iou / .dice."""
        out = {"accuracy": self.accuracy, "miou": self.mean_iou, "dice": self.mean_dice}
        for c in range(len(self.iou)):
            out[f"per_class.{c}.iou"] = float(self.iou[c])
            out[f"per_class.{c}.dice"] = float(self.dice[c])
            out[f"per_class.{c}.valid"] = bool(self.valid[c])
        return out


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    idx = gt.ravel().astype(np.int64) * num_classes + pred.ravel().astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def metrics_from_confusion(cm: np.ndarray) -> MetricReport:
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    valid = (tp + fp + fn) > 0
    iou = np.zeros(len(tp))
    dice = np.zeros(len(tp))
    iou[valid] = tp[valid] / (tp + fp + fn)[valid]
    dice[valid] = 2 * tp[valid] / (2 * tp + fp + fn)[valid]
    total = cm.sum()
    acc = float(tp.sum() / total) if total else 0.0
    miou = float(iou[valid].mean()) if valid.any() else 0.0
    mdice = float(dice[valid].mean()) if valid.any() else 0.0
    return MetricReport(acc, iou, dice, miou, mdice, cm, valid)


def metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> MetricReport:
    """Accuracy, per-class and mean IoU/Dice; classes absent from both maps are left out of the means."""
    return metrics_from_confusion(confusion_matrix(pred, gt, num_classes))


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Channel argmax of (B,) K x H x W logits; ties resolve to the lowest index."""
    logits = np.asarray(logits)
    return logits.argmax(axis=-3)
