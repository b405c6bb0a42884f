"""Segmentation metrics (per-class IoU, mIoU, mF1) and model evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from mscada.pseudo import ClassRegistry, fuse_predictions
from mscada.tensor import IGNORE_LABEL, Tensor, no_grad


@dataclass
class MetricsReport:
    per_class_iou: np.ndarray   # NaN for classes absent from both gt and pred
    miou: float
    mf1: float
    confusion: np.ndarray       # rows ground truth, cols prediction
    iteration: int = 0
    wall_clock: float = 0.0
    class_names: tuple[str, ...] = field(default_factory=tuple)

    def to_text(self) -> str:
        lines = [f"iteration {self.iteration}"]
        for i, iou in enumerate(self.per_class_iou):
            name = self.class_names[i] if i < len(self.class_names) else f"class{i}"
            val = "  n/a" if np.isnan(iou) else f"{iou:.4f}"
            lines.append(f"  IoU {name:<8s} {val}")
        lines.append(f"  mIoU {self.miou:.4f}")
        lines.append(f"  mF1  {self.mf1:.4f}")
        return "\n".join(lines)


def accumulate_confusion(confusion: np.ndarray, gt: np.ndarray, pred: np.ndarray) -> None:
    """Add one batch of pixels; ground-truth IGNORE_LABEL pixels are skipped."""
    n = confusion.shape[0]
    gt, pred = np.asarray(gt).ravel(), np.asarray(pred).ravel()
    valid = (gt != IGNORE_LABEL) & (gt >= 0) & (gt < n)
    counts = np.bincount(n * gt[valid] + pred[valid], minlength=n * n)
    confusion += counts.reshape(n, n)


def iou_f1_from_confusion(confusion: np.ndarray) -> tuple[np.ndarray, float, np.ndarray, float]:
    """IoU_c = TP/(TP+FP+FN), F1_c = 2TP/(2TP+FP+FN); 0/0 classes are NaN and
    excluded from the means."""
    tp = np.diag(confusion).astype(np.float64)
    fn = confusion.sum(axis=1) - tp
    fp = confusion.sum(axis=0) - tp
    union = tp + fp + fn
    iou = np.where(union > 0, tp / np.where(union > 0, union, 1.0), np.nan)
    f1_den = 2 * tp + fp + fn
    f1 = np.where(f1_den > 0, 2 * tp / np.where(f1_den > 0, f1_den, 1.0), np.nan)
    miou = float(np.nanmean(iou)) if np.any(union > 0) else float("nan")
    mf1 = float(np.nanmean(f1)) if np.any(f1_den > 0) else float("nan")
    return iou, miou, f1, mf1


def branch_prediction_histogram(model, samples, batch_size: int = 16) -> np.ndarray:
    """Per-branch pixel counts of argmax classes over the union space,
    shape (k, num_union_classes). Used to measure class supplementation."""
    k = model.num_sources
    counts = None
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x = Tensor(np.stack([s.image for s in chunk]))
            for i in range(1, k + 1):
                logits = model.forward_branch(i, x).data
                if counts is None:
                    counts = np.zeros((k, logits.shape[1]), dtype=np.int64)
                pred = logits.argmax(axis=1)
                counts[i - 1] += np.bincount(pred.ravel(), minlength=logits.shape[1])
    return counts


def evaluate(model, samples, registry: ClassRegistry, use_head: bool = True,
             batch_size: int = 16, iteration: int = 0,
             class_names: tuple[str, ...] = ()) -> MetricsReport:
    """Confusion-matrix metrics on labeled samples in target class space.

    use_head routes inference through the integration head; otherwise the
    per-branch predictions are fused winner-take-all with the argmax
    restricted to target classes (the fallback used by the no-head ablation).
    """
    start_time = time.perf_counter()
    n = registry.num_target
    confusion = np.zeros((n, n), dtype=np.int64)
    target_ids = np.array(registry.target_classes)
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x = Tensor(np.stack([s.image for s in chunk]))
            if use_head:
                pred = model.forward_target(x).data.argmax(axis=1)
            else:
                stack = np.stack([model.forward_branch(i, x).data
                                  for i in range(1, model.num_sources + 1)])
                pred, _ = fuse_predictions(stack[:, :, target_ids])
            gt = registry.to_target_space(np.stack([s.label for s in chunk]))
            accumulate_confusion(confusion, gt, pred)
    iou, miou, _, mf1 = iou_f1_from_confusion(confusion)
    return MetricsReport(iou, miou, mf1, confusion, iteration,
                         time.perf_counter() - start_time, tuple(class_names))
