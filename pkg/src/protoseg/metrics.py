"""Confusion-matrix accumulation and the segmentation metric battery.

Per-class scores derive from one K x K matrix (rows: ground truth, columns:
prediction). Macro averages come in with- and without-background flavors;
classes that appear in neither the ground truth nor the prediction are
excluded from macro means (the exclusion count is reported). Everything is
plain numpy; nothing here touches the autodiff graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ContractViolationError

CSV_COLUMNS = ("F1 w/bg", "F1 w/o", "mIoU w/bg", "mIoU w/o", "Bal. Acc.", "MCC", "FW IoU")
_FIELD_ORDER = (
    "f1_with_bg", "f1_no_bg", "miou_with_bg", "miou_no_bg", "balanced_acc", "mcc", "fw_iou",
)


class ConfusionMatrix:
    """Nonnegative integer counts; merging is element-wise addition."""

    def __init__(self, counts: np.ndarray):
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ContractViolationError(f"confusion matrix must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ContractViolationError("confusion matrix counts must be nonnegative")
        self.counts = counts.astype(np.int64)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.num_classes != other.num_classes:
            raise ContractViolationError("cannot merge matrices of different class counts")
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def confusion_matrix(prediction: np.ndarray, ground_truth: np.ndarray,
                     num_classes: int) -> ConfusionMatrix:
    pred = np.asarray(prediction)
    gt = np.asarray(ground_truth)
    if pred.shape != gt.shape:
        raise ContractViolationError(f"shape mismatch: prediction {pred.shape} vs mask {gt.shape}")
    if pred.size and (pred.max() >= num_classes or gt.max() >= num_classes
                      or pred.min() < 0 or gt.min() < 0):
        raise ContractViolationError(f"labels must lie in [0, {num_classes - 1}]")
    flat = gt.reshape(-1).astype(np.int64) * num_classes + pred.reshape(-1)
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


@dataclass
class MetricReport:
    f1_with_bg: float
    f1_no_bg: float
    miou_with_bg: float
    miou_no_bg: float
    balanced_acc: float
    mcc: float
    fw_iou: float
    excluded_classes: int = 0

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in _FIELD_ORDER)

    def to_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def csv_row(self) -> str:
        return ",".join(f"{v:.6f}" for v in self.values())

    @staticmethod
    def csv_header() -> str:
        return ",".join(CSV_COLUMNS)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def compute_metrics(cm: ConfusionMatrix, background_id: int = 0) -> MetricReport:
    counts = cm.counts.astype(np.float64)
    if counts.sum() == 0:
        raise ContractViolationError("cannot score an empty confusion matrix")
    k = cm.num_classes
    if not 0 <= background_id < k:
        raise ContractViolationError(f"background id {background_id} outside 0..{k - 1}")

    tp = np.diag(counts)
    gt_totals = counts.sum(axis=1)
    pred_totals = counts.sum(axis=0)
    fp = pred_totals - tp
    fn = gt_totals - tp

    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    iou = _safe_div(tp, tp + fp + fn)

    present = (gt_totals + pred_totals) > 0  # excluded iff absent from GT and prediction
    non_bg = np.arange(k) != background_id

    def macro(values: np.ndarray, include_bg: bool) -> float:
        sel = present if include_bg else (present & non_bg)
        return float(values[sel].mean()) if sel.any() else 0.0

    in_gt = gt_totals > 0
    balanced = float(recall[in_gt].mean()) if in_gt.any() else 0.0

    total = counts.sum()
    trace = tp.sum()
    cov = trace * total - float(pred_totals @ gt_totals)
    var_pred = total * total - float(pred_totals @ pred_totals)
    var_gt = total * total - float(gt_totals @ gt_totals)
    mcc = cov / math.sqrt(var_pred * var_gt) if var_pred > 0 and var_gt > 0 else 0.0

    fw_iou = float(((gt_totals / total) * iou).sum())

    return MetricReport(
        f1_with_bg=macro(f1, True),
        f1_no_bg=macro(f1, False),
        miou_with_bg=macro(iou, True),
        miou_no_bg=macro(iou, False),
        balanced_acc=balanced,
        mcc=mcc,
        fw_iou=fw_iou,
        excluded_classes=int((~present).sum()),
    )


@dataclass
class AggregateReport:
    """Mean and standard deviation of per-episode reports."""

    mean: MetricReport
    std: MetricReport
    episodes: int
    pooled: bool = False

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "pooled": self.pooled,
            "mean": self.mean.to_dict(),
            "std": self.std.to_dict(),
        }


def aggregate_reports(reports: list[MetricReport]) -> AggregateReport:
    """Episode-level aggregation: average the per-episode metric values."""
    if not reports:
        raise ContractViolationError("no reports to aggregate")
    table = np.array([r.values() for r in reports])
    mean = table.mean(axis=0)
    std = table.std(axis=0)
    excl = [r.excluded_classes for r in reports]
    return AggregateReport(
        mean=MetricReport(*mean, excluded_classes=int(np.mean(excl))),
        std=MetricReport(*std, excluded_classes=0),
        episodes=len(reports),
    )


def pooled_report(matrices: list[ConfusionMatrix], background_id: int = 0) -> AggregateReport:
    """Alternative aggregation: merge all matrices, then score once."""
    if not matrices:
        raise ContractViolationError("no matrices to pool")
    total = matrices[0]
    for m in matrices[1:]:
        total = total + m
    report = compute_metrics(total, background_id)
    zero = MetricReport(0, 0, 0, 0, 0, 0, 0)
    return AggregateReport(mean=report, std=zero, episodes=len(matrices), pooled=True)
