"""Confusion-count IoU, mIoU over class subsets, harmonic mean, aggregation.

mIoU values in :class:`MetricsReport` are percentages (0-100), matching how
results tables are usually reported; per-class IoUs are fractions in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

IGNORE_INDEX = 255


class ConfusionAccumulator:
    """Per-class TP / FP / FN pixel counts; merges by elementwise addition."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.tp = np.zeros(n_classes, dtype=np.int64)
        self.fp = np.zeros(n_classes, dtype=np.int64)
        self.fn = np.zeros(n_classes, dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray, ignore_index: int = IGNORE_INDEX) -> "ConfusionAccumulator":
        return confusion_update(self, pred, gt, ignore_index)

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.n_classes != self.n_classes:
            raise ValueError("cannot merge accumulators with different class counts")
        out = ConfusionAccumulator(self.n_classes)
        out.tp = self.tp + other.tp
        out.fp = self.fp + other.fp
        out.fn = self.fn + other.fn
        return out

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ConfusionAccumulator)
            and np.array_equal(self.tp, other.tp)
            and np.array_equal(self.fp, other.fp)
            and np.array_equal(self.fn, other.fn)
        )


def confusion_update(
    acc: ConfusionAccumulator, pred_mask: np.ndarray, gt_mask: np.ndarray, ignore_index: int = IGNORE_INDEX
) -> ConfusionAccumulator:
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"prediction shape {pred_mask.shape} != ground-truth shape {gt_mask.shape}")
    keep = gt_mask != ignore_index
    pred = pred_mask[keep].astype(np.int64)
    gt = gt_mask[keep].astype(np.int64)
    n = acc.n_classes
    if pred.size and (pred.min() < 0 or pred.max() >= n):
        raise ValueError(f"prediction contains class outside [0, {n})")
    if gt.size and (gt.min() < 0 or gt.max() >= n):
        raise ValueError(f"ground truth contains class outside [0, {n}) other than {ignore_index}")
    hit = pred == gt
    acc.tp += np.bincount(gt[hit], minlength=n)
    acc.fp += np.bincount(pred[~hit], minlength=n)
    acc.fn += np.bincount(gt[~hit], minlength=n)
    return acc


def iou_per_class(acc: ConfusionAccumulator) -> np.ndarray:
    """IoU per class; NaN marks an absent class (zero denominator)."""
    denom = acc.tp + acc.fp + acc.fn
    out = np.full(acc.n_classes, np.nan)
    present = denom > 0
    out[present] = acc.tp[present] / denom[present]
    return out


def miou(acc: ConfusionAccumulator, class_subset: Iterable[int]) -> float:
    """Mean IoU (fraction) over the present classes of ``class_subset``."""
    ious = iou_per_class(acc)
    subset = sorted(set(int(c) for c in class_subset))
    vals = [ious[c] for c in subset if not np.isnan(ious[c])]
    if not vals:
        raise ValueError(f"no present class among {subset}")
    return float(np.mean(vals))


def harmonic_mean(a: float, b: float) -> float:
    if a < 0 or b < 0:
        raise ValueError("harmonic mean needs nonnegative arguments")
    if a == 0 or b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


@dataclass
class MetricsReport:
    miou_base: float
    miou_new: float
    hm: float
    iou_per_class: dict[int, float] = field(default_factory=dict)
    base_classes: tuple[int, ...] = ()
    new_classes: tuple[int, ...] = ()
    fold_index: Optional[int] = None
    step_index: Optional[int] = None
    trial_index: Optional[int] = None
    hm_of_means: Optional[float] = None
    mean_of_hms: Optional[float] = None

    def as_dict(self) -> dict:
        return {
            "fold": self.fold_index,
            "trial": self.trial_index,
            "step": self.step_index,
            "miou_base": self.miou_base,
            "miou_new": self.miou_new,
            "hm": self.hm,
            "hm_of_means": self.hm_of_means if self.hm_of_means is not None else self.hm,
            "mean_of_hms": self.mean_of_hms if self.mean_of_hms is not None else self.hm,
            "base_classes": list(self.base_classes),
            "new_classes": list(self.new_classes),
            "iou_per_class": {str(k): v for k, v in sorted(self.iou_per_class.items())},
        }


def make_report(
    acc: ConfusionAccumulator,
    base_classes: Sequence[int],
    new_classes: Sequence[int],
    *,
    background_in_base: bool = True,
    fold_index: Optional[int] = None,
    step_index: Optional[int] = None,
    trial_index: Optional[int] = None,
) -> MetricsReport:
    base = tuple(sorted(c for c in base_classes if background_in_base or c != 0))
    new = tuple(sorted(new_classes))
    ious = iou_per_class(acc)
    b = 100.0 * miou(acc, base)
    n = 100.0 * miou(acc, new)
    return MetricsReport(
        miou_base=b,
        miou_new=n,
        hm=harmonic_mean(b, n),
        iou_per_class={c: float(ious[c]) for c in (*base, *new) if not np.isnan(ious[c])},
        base_classes=base,
        new_classes=new,
        fold_index=fold_index,
        step_index=step_index,
        trial_index=trial_index,
    )


def aggregate(reports: Sequence[MetricsReport], axes: Sequence[str] = ("trial",), hm_mode: str = "recompute") -> MetricsReport:
    """Average reports along ``axes`` (any of "trial", "fold", "step").

    ``hm_mode="recompute"`` takes the HM of the averaged mIoUs; ``"average"``
    averages the per-report HMs.  Both values are kept on the result.
    """
    if not reports:
        raise ValueError("nothing to aggregate")
    if hm_mode not in ("recompute", "average"):
        raise ValueError(f"unknown hm_mode {hm_mode!r}")
    first = reports[0]
    if len(reports) == 1:
        return first
    if "fold" not in axes and "step" not in axes:
        # folds and MS steps legitimately differ in their class subsets; trials may not
        for r in reports[1:]:
            if r.base_classes != first.base_classes or r.new_classes != first.new_classes:
                raise ValueError("cannot aggregate reports over different class subsets")
    b = float(np.mean([r.miou_base for r in reports]))
    n = float(np.mean([r.miou_new for r in reports]))
    hm_of_means = harmonic_mean(b, n)
    mean_of_hms = float(np.mean([r.hm if r.mean_of_hms is None else r.mean_of_hms for r in reports]))
    keys = set().union(*(r.iou_per_class for r in reports))
    ious = {}
    for k in sorted(keys):
        vals = [r.iou_per_class[k] for r in reports if k in r.iou_per_class]
        ious[k] = float(np.mean(vals))

    def common(attr):
        vals = {getattr(r, attr) for r in reports}
        return vals.pop() if len(vals) == 1 else None

    return replace(
        first,
        miou_base=b,
        miou_new=n,
        hm=hm_of_means if hm_mode == "recompute" else mean_of_hms,
        hm_of_means=hm_of_means,
        mean_of_hms=mean_of_hms,
        iou_per_class=ious,
        base_classes=first.base_classes if common("base_classes") is not None else (),
        new_classes=first.new_classes if common("new_classes") is not None else (),
        fold_index=None if "fold" in axes else common("fold_index"),
        trial_index=None if "trial" in axes else common("trial_index"),
        step_index=None if "step" in axes else common("step_index"),
    )
