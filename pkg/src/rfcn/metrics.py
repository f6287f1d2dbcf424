"""Confusion counts and precision / recall / F-measure / IoU for binary masks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import DimensionError


def precision_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp + fp == 0:
        return 1.0 if fn == 0 else 0.0
    return tp / (tp + fp)


def recall_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp + fn == 0:
        return 1.0 if fp == 0 else 0.0
    return tp / (tp + fn)


def f_measure(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both vanish."""
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def iou_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn == 0:
        return 1.0
    return tp / (tp + fp + fn)


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f_measure: float
    iou: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int = 0) -> "MetricsReport":
        p = precision_from_counts(tp, fp, fn)
        r = recall_from_counts(tp, fp, fn)
        return cls(int(tp), int(fp), int(fn), int(tn), p, r, f_measure(p, r), iou_from_counts(tp, fp, fn))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
            "precision": self.precision, "recall": self.recall,
            "f_measure": self.f_measure, "iou": self.iou,
        }


def score(pred, gt, threshold: float = 0.5) -> MetricsReport:
    """Binarise ``pred`` at ``pred > threshold`` and count against ``gt``."""
    p = np.asarray(getattr(pred, "data", pred))
    g = np.asarray(getattr(gt, "data", gt))
    p, g = np.squeeze(p), np.squeeze(g)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} and ground truth {g.shape} differ")
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    pos = p > threshold
    truth = g > 0.5
    tp = int(np.count_nonzero(pos & truth))
    fp = int(np.count_nonzero(pos & ~truth))
    fn = int(np.count_nonzero(~pos & truth))
    tn = int(pos.size - tp - fp - fn)
    return MetricsReport.from_counts(tp, fp, fn, tn)


def aggregate(reports: Sequence[MetricsReport], mode: str = "micro") -> MetricsReport:
    """Micro: metrics from summed counts. Macro: mean of per-report metrics (counts still summed)."""
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    tp = sum(r.tp for r in reports)
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    tn = sum(r.tn for r in reports)
    if mode == "micro":
        return MetricsReport.from_counts(tp, fp, fn, tn)
    if mode == "macro":
        mean = lambda attr: float(np.mean([getattr(r, attr) for r in reports]))  # noqa: E731
        return MetricsReport(tp, fp, fn, tn, mean("precision"), mean("recall"), mean("f_measure"), mean("iou"))
    raise ValueError(f"unknown aggregation mode {mode!r}")
