"""Pixel-level segmentation metrics with per-image rows and mean/std aggregation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

METRIC_NAMES = ("iou", "precision", "recall", "f_beta", "dice")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred: np.ndarray, gt: np.ndarray, positive_class: int = 1) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    p = pred == positive_class
    g = gt == positive_class
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def _ratio(num: int, den: int) -> Tuple[float, bool]:
    """num/den, or (1.0, flagged) when both are zero."""
    if den == 0:
        return 1.0, True
    return num / den, False


def iou(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn)[0]


def precision_recall(c: ConfusionCounts) -> Tuple[float, float]:
    return _ratio(c.tp, c.tp + c.fp)[0], _ratio(c.tp, c.tp + c.fn)[0]


def f_beta(precision: float, recall: float, beta: float = 1.0) -> float:
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    b2 = beta * beta
    den = b2 * precision + recall
    if den == 0:
        return 0.0
    return (1 + b2) * precision * recall / den


def dice(c: ConfusionCounts) -> float:
    return f_beta(*precision_recall(c), beta=1.0)


def image_metrics(pred: np.ndarray, gt: np.ndarray, beta: float = 1.0,
                  sample_id: str = "") -> dict:
    """One per-image row; ``flags`` names any metric set by the 0/0 convention."""
    c = confusion(pred, gt)
    flags = [name for name, den in (("iou", c.tp + c.fp + c.fn),
                                    ("precision", c.tp + c.fp),
                                    ("recall", c.tp + c.fn)) if den == 0]
    p, r = precision_recall(c)
    return {
        "sample_id": sample_id,
        "iou": iou(c),
        "precision": p,
        "recall": r,
        "f_beta": f_beta(p, r, beta),
        "dice": f_beta(p, r, 1.0),
        "flags": flags,
    }


@dataclass
class MetricReport:
    per_image: List[dict]
    beta: float = 1.0
    mean: Dict[str, float] = field(default_factory=dict)
    std: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"beta": self.beta, "n_images": len(self.per_image),
                "mean": self.mean, "std": self.std, "per_image": self.per_image}

    def to_json(self, indent: Optional[int] = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def aggregate(per_image: Sequence[dict], beta: float = 1.0) -> MetricReport:
    """Mean and sample standard deviation (n-1 divisor; 0 for a single image)."""
    if not per_image:
        raise ValueError("cannot aggregate an empty list of images")
    mean, std = {}, {}
    for name in METRIC_NAMES:
        vals = np.array([row[name] for row in per_image], dtype=np.float64)
        mean[name] = float(vals.mean())
        std[name] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return MetricReport(list(per_image), beta, mean, std)
