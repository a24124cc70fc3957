"""Evaluation of semantic labels and of over-segmentations.

Semantic quality is summarized by per-class IoU/accuracy and their means
over the classes present in the ground truth. Segmentation quality uses two
complementary percentages: the under-segmentation error charges segments
that straddle ground-truth region boundaries, and the over-segmentation
error is the accuracy lost when ground-truth labels are pushed through the
segments by majority vote.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SemanticMetrics:
    confusion: np.ndarray       # (C, C), rows = ground truth, cols = prediction
    per_class_iou: np.ndarray   # (C,) percent, NaN for classes absent from gt
    per_class_acc: np.ndarray   # (C,) percent, NaN for classes absent from gt
    miou: float                 # percent, mean over classes present in gt
    macc: float                 # percent, mean over classes present in gt

    def to_dict(self) -> dict:
        return {
            "per_class_iou": [None if np.isnan(v) else float(v)
                              for v in self.per_class_iou],
            "per_class_acc": [None if np.isnan(v) else float(v)
                              for v in self.per_class_acc],
            "miou": None if np.isnan(self.miou) else float(self.miou),
            "macc": None if np.isnan(self.macc) else float(self.macc),
        }


def confusion_matrix(gt, pred, num_classes: int,
                     ignore_label: int | None = None) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if gt.shape != pred.shape:
        raise ValueError("label arrays must have equal length")
    keep = (gt >= 0) & (gt < num_classes) & (pred >= 0) & (pred < num_classes)
    if ignore_label is not None:
        keep &= (gt != ignore_label) & (pred != ignore_label)
    flat = num_classes * gt[keep] + pred[keep]
    return np.bincount(flat, minlength=num_classes ** 2)\
        .reshape(num_classes, num_classes)


def semantic_metrics(gt, pred, num_classes: int,
                     ignore_label: int | None = None) -> SemanticMetrics:
    """Per-class IoU and accuracy plus their means, in percent.

    Classes never seen in the ground truth get NaN and are excluded from the
    means; with nothing to evaluate every field is NaN.
    """
    conf = confusion_matrix(gt, pred, num_classes, ignore_label)
    tp = np.diag(conf).astype(np.float64)
    fn = conf.sum(axis=1) - tp
    fp = conf.sum(axis=0) - tp
    present = conf.sum(axis=1) > 0
    if ignore_label is not None and 0 <= ignore_label < num_classes:
        present[ignore_label] = False

    iou = np.full(num_classes, np.nan)
    acc = np.full(num_classes, np.nan)
    denom = tp + fp + fn
    iou[present] = 100.0 * tp[present] / denom[present]
    acc[present] = 100.0 * tp[present] / (tp[present] + fn[present])
    miou = float(np.mean(iou[present])) if present.any() else float("nan")
    macc = float(np.mean(acc[present])) if present.any() else float("nan")
    return SemanticMetrics(conf, iou, acc, miou, macc)


def undersegmentation_error(assignment, gt_regions) -> float:
    """Percentage of element mass carried across region boundaries.

    For every ground-truth region, the sizes of all predicted segments that
    intersect it are summed; the excess of that total over the element count
    is reported relative to the element count:

        100 * (sum_j sum_{i : s_i meets g_j} |s_i|  -  N) / N
    """
    a = np.asarray(assignment, dtype=np.int64).ravel()
    g = np.asarray(gt_regions, dtype=np.int64).ravel()
    if a.shape != g.shape:
        raise ValueError("partitions must cover the same elements")
    n = len(a)
    if n == 0:
        return float("nan")
    seg_labels, seg_rows = np.unique(a, return_inverse=True)
    sizes = np.bincount(seg_rows)
    pairs = np.unique(np.stack([g, seg_rows], axis=1), axis=0)
    total = sizes[pairs[:, 1]].sum()
    return 100.0 * float(total - n) / n


def oversegmentation_error(assignment, gt_labels, num_classes: int | None = None,
                           ignore_label: int | None = None):
    """Accuracy lost by squeezing labels through the segmentation.

    Each segment takes the majority label of its members (ties to the
    smallest class id), the label is propagated back to the members, and the
    error is 100 minus the mean class accuracy of the propagated labels.

    Returns (error_percent, propagated_labels).
    """
    a = np.asarray(assignment, dtype=np.int64).ravel()
    gt = np.asarray(gt_labels, dtype=np.int64).ravel()
    if a.shape != gt.shape:
        raise ValueError("assignment and labels must have equal length")
    if num_classes is None:
        num_classes = int(gt.max()) + 1 if len(gt) else 0

    seg_labels, seg_rows = np.unique(a, return_inverse=True)
    # majority vote per segment: count (segment, class) pairs, then pick the
    # highest count with ties to the smaller class id
    pair = np.stack([seg_rows, gt], axis=1)
    uniq, counts = np.unique(pair, axis=0, return_counts=True)
    order = np.lexsort((uniq[:, 1], -counts, uniq[:, 0]))
    uniq, counts = uniq[order], counts[order]
    first = np.unique(uniq[:, 0], return_index=True)[1]
    majority = np.zeros(len(seg_labels), dtype=np.int64)
    majority[uniq[first, 0]] = uniq[first, 1]

    propagated = majority[seg_rows]
    m = semantic_metrics(gt, propagated, num_classes, ignore_label)
    return 100.0 - m.macc, propagated


@dataclass
class SizeStats:
    count: int
    mean: float  # NaN when empty
    std: float   # population standard deviation, NaN when empty

    def to_dict(self) -> dict:
        return {"count": self.count,
                "mean": None if np.isnan(self.mean) else float(self.mean),
                "std": None if np.isnan(self.std) else float(self.std)}


def segment_size_stats(assignment) -> SizeStats:
    """Count, mean and population std of segment member counts."""
    a = np.asarray(assignment, dtype=np.int64).ravel()
    a = a[a >= 0]
    if len(a) == 0:
        return SizeStats(0, float("nan"), float("nan"))
    sizes = np.unique(a, return_counts=True)[1]
    return SizeStats(len(sizes), float(sizes.mean()), float(sizes.std()))
