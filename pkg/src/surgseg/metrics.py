"""Segmentation quality metrics.

Each class is scored one-vs-rest from its binary masks.  Conventions
for degenerate inputs are part of the contract:

  * Dice of two empty masks is 1.0 (perfect agreement on absence).
  * Hausdorff distance is undefined if either mask is empty; such
    samples carry ``None`` and are excluded from aggregation.
  * Specificity / sensitivity with a zero denominator are 1.0 (no
    negatives to misclassify, resp. no positives to miss).

The headline number of a report is the mean foreground Dice: the mean
over foreground classes actually present in the ground truth (falling
back to classes present in the prediction, and to 1.0 if neither mask
contains any foreground at all).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import directed_hausdorff

from .data import TaskSpec
from .errors import DataError


@dataclass(frozen=True)
class ConfusionCounts:
    """One-vs-rest pixel counts for a single class."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_counts(pred: np.ndarray, gt: np.ndarray, cls: int) -> ConfusionCounts:
    """Count tp/fp/tn/fn of ``pred == cls`` against ``gt == cls``."""
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    p = pred == cls
    g = gt == cls
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Dice overlap 2|P∩G| / (|P|+|G|); two empty masks score 1.0."""
    if pred_mask.shape != gt_mask.shape:
        raise DataError(f"masks differ in shape: {pred_mask.shape} vs {gt_mask.shape}")
    p = pred_mask.astype(bool)
    g = gt_mask.astype(bool)
    denom = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if denom == 0:
        return 1.0
    return 2.0 * np.count_nonzero(p & g) / denom


def hausdorff(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float | None:
    """Symmetric Hausdorff distance between the foreground pixel sets.

    Pixel coordinates are (row, col) points in Euclidean space.  Returns
    ``None`` when either mask has no foreground.
    """
    if pred_mask.shape != gt_mask.shape:
        raise DataError(f"masks differ in shape: {pred_mask.shape} vs {gt_mask.shape}")
    p = np.argwhere(pred_mask.astype(bool)).astype(np.float64)
    g = np.argwhere(gt_mask.astype(bool)).astype(np.float64)
    if len(p) == 0 or len(g) == 0:
        return None
    forward = directed_hausdorff(p, g)[0]
    backward = directed_hausdorff(g, p)[0]
    return float(max(forward, backward))


def specificity(counts: ConfusionCounts) -> float:
    """tn / (tn + fp); 1.0 when the class fills the whole image."""
    denom = counts.tn + counts.fp
    return counts.tn / denom if denom else 1.0


def sensitivity(counts: ConfusionCounts) -> float:
    """tp / (tp + fn); 1.0 when the class is absent from the ground truth."""
    denom = counts.tp + counts.fn
    return counts.tp / denom if denom else 1.0


@dataclass(frozen=True)
class ClassMetrics:
    """Per-class scores for one sample (or one aggregated split)."""

    class_index: int
    class_name: str
    dice: float
    hausdorff: float | None
    specificity: float
    sensitivity: float
    gt_pixels: int
    pred_pixels: int


@dataclass(frozen=True)
class MetricReport:
    """Scores for every class of a task plus the headline foreground mean."""

    task: str
    per_class: tuple[ClassMetrics, ...]
    mean_foreground_dice: float
    num_samples: int = 1

    def to_text(self) -> str:
        lines = [
            f"task={self.task} samples={self.num_samples}",
            f"mean_foreground_dice={self.mean_foreground_dice:.6f}",
            f"{'class':<28}{'dice':>10}{'hausdorff':>12}{'spec':>10}{'sens':>10}{'gt_px':>10}{'pred_px':>10}",
        ]
        for m in self.per_class:
            hd = f"{m.hausdorff:.3f}" if m.hausdorff is not None else "n/a"
            lines.append(
                f"{m.class_index}:{m.class_name:<26}{m.dice:>10.6f}{hd:>12}"
                f"{m.specificity:>10.6f}{m.sensitivity:>10.6f}{m.gt_pixels:>10}{m.pred_pixels:>10}"
            )
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(
            {
                "task": self.task,
                "num_samples": self.num_samples,
                "mean_foreground_dice": self.mean_foreground_dice,
                "per_class": [
                    {
                        "class_index": m.class_index,
                        "class_name": m.class_name,
                        "dice": m.dice,
                        "hausdorff": m.hausdorff,
                        "specificity": m.specificity,
                        "sensitivity": m.sensitivity,
                        "gt_pixels": m.gt_pixels,
                        "pred_pixels": m.pred_pixels,
                    }
                    for m in self.per_class
                ],
            },
            sort_keys=True,
        )


def mean_foreground_dice(pred: np.ndarray, gt: np.ndarray, task: TaskSpec) -> float:
    """Mean Dice over foreground classes present in the ground truth.

    Falls back to classes present in the prediction when the ground
    truth is all background, and to 1.0 when both are.
    """
    gt_classes = [c for c in task.foreground_classes if np.any(gt == c)]
    classes = gt_classes or [c for c in task.foreground_classes if np.any(pred == c)]
    if not classes:
        return 1.0
    return float(np.mean([dice(pred == c, gt == c) for c in classes]))


def evaluate_multiclass(pred: np.ndarray, gt: np.ndarray, task: TaskSpec) -> MetricReport:
    """Score one predicted label map against its ground truth."""
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    bad = np.unique(pred[(pred < 0) | (pred >= task.num_classes)])
    if bad.size:
        raise DataError(f"prediction contains labels {bad.tolist()} outside 0..{task.num_classes - 1}")
    rows = []
    for cls in range(task.num_classes):
        counts = confusion_counts(pred, gt, cls)
        rows.append(
            ClassMetrics(
                class_index=cls,
                class_name=task.class_names[cls],
                dice=dice(pred == cls, gt == cls),
                hausdorff=hausdorff(pred == cls, gt == cls),
                specificity=specificity(counts),
                sensitivity=sensitivity(counts),
                gt_pixels=counts.tp + counts.fn,
                pred_pixels=counts.tp + counts.fp,
            )
        )
    return MetricReport(
        task=task.kind,
        per_class=tuple(rows),
        mean_foreground_dice=mean_foreground_dice(pred, gt, task),
        num_samples=1,
    )


def aggregate_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Average per-sample reports over a dataset split.

    Scalar metrics are means over samples; Hausdorff averages only the
    samples where it is defined (``None`` if it never is).  The headline
    stays the mean over samples of each sample's foreground mean.
    """
    if not reports:
        raise DataError("cannot aggregate zero reports")
    tasks = {r.task for r in reports}
    if len(tasks) != 1:
        raise DataError(f"cannot aggregate reports of different tasks: {sorted(tasks)}")
    n_classes = len(reports[0].per_class)
    rows = []
    for idx in range(n_classes):
        cells = [r.per_class[idx] for r in reports]
        hds = [c.hausdorff for c in cells if c.hausdorff is not None]
        rows.append(
            ClassMetrics(
                class_index=cells[0].class_index,
                class_name=cells[0].class_name,
                dice=float(np.mean([c.dice for c in cells])),
                hausdorff=float(np.mean(hds)) if hds else None,
                specificity=float(np.mean([c.specificity for c in cells])),
                sensitivity=float(np.mean([c.sensitivity for c in cells])),
                gt_pixels=int(sum(c.gt_pixels for c in cells)),
                pred_pixels=int(sum(c.pred_pixels for c in cells)),
            )
        )
    return MetricReport(
        task=reports[0].task,
        per_class=tuple(rows),
        mean_foreground_dice=float(np.mean([r.mean_foreground_dice for r in reports])),
        num_samples=sum(r.num_samples for r in reports),
    )
