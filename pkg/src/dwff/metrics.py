"""Confusion-matrix segmentation metrics (per-class P/R/F1/IoU and their unweighted means)."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .features import CLASSES, NUM_CLASSES


class ConfusionMatrix:
    """``counts[g, p]`` = pixels with ground truth ``g`` predicted as ``p``."""

    def __init__(self, num_classes: int = NUM_CLASSES, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or np.any(counts < 0):
            raise ValueError("counts must be a non-negative C x C integer matrix")
        self.counts = counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred, truth) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ValueError(f"prediction shape {pred.shape} differs from truth shape {truth.shape}")
        c = self.num_classes
        for name, a in (("prediction", pred), ("truth", truth)):
            if a.dtype.kind not in "ui":
                raise ValueError(f"{name} ids must be integers")
            if a.size and (a.min() < 0 or a.max() >= c):
                raise ValueError(f"{name} ids must lie in [0, {c})")
        idx = truth.astype(np.int64).ravel() * c + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred, truth) -> ConfusionMatrix:
    return cm.accumulate(pred, truth)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def class_metrics(cm: ConfusionMatrix, c: int) -> tuple[float, float, float, float]:
    """(precision, recall, f1, iou) for class ``c``; any 0/0 is 0."""
    counts = cm.counts
    tp = int(counts[c, c])
    fp = int(counts[:, c].sum()) - tp
    fn = int(counts[c, :].sum()) - tp
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2.0 * precision * recall, precision + recall)
    iou = _ratio(tp, tp + fp + fn)
    return precision, recall, f1, iou


@dataclass(frozen=True)
class ClassReport:
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    iou: tuple[float, ...]
    m_precision: float
    m_recall: float
    m_f1: float
    m_iou: float

    @property
    def means(self) -> tuple[float, float, float, float]:
        return self.m_precision, self.m_recall, self.m_f1, self.m_iou

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "abbrev", "precision", "recall", "f1", "iou"])
        for i in range(len(self.iou)):
            w.writerow([i, CLASSES[i][0] if i < len(CLASSES) else f"c{i}", *map(repr, (self.precision[i], self.recall[i], self.f1[i], self.iou[i]))])
        w.writerow(["mean", "", *map(repr, self.means)])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'class':>5} {'abbrev':<6} {'precision':>9} {'recall':>9} {'f1':>9} {'iou':>9}"]
        for i in range(len(self.iou)):
            ab = CLASSES[i][0] if i < len(CLASSES) else f"c{i}"
            lines.append(f"{i:>5} {ab:<6} {self.precision[i]:>9.4f} {self.recall[i]:>9.4f} {self.f1[i]:>9.4f} {self.iou[i]:>9.4f}")
        lines.append(f"{'mean':>5} {'':<6} {self.m_precision:>9.4f} {self.m_recall:>9.4f} {self.m_f1:>9.4f} {self.m_iou:>9.4f}")
        return "\n".join(lines) + "\n"


def mean_metrics(per_class, num_classes: int = NUM_CLASSES) -> ClassReport:
    """Unweighted means over exactly ``num_classes`` (precision, recall, f1, iou) tuples."""
    per_class = [tuple(float(v) for v in row) for row in per_class]
    if len(per_class) != num_classes:
        raise ValueError(f"expected {num_classes} per-class rows, got {len(per_class)}")
    cols = list(zip(*per_class))
    means = [math.fsum(col) / num_classes for col in cols]
    return ClassReport(*cols, *means)


def report(cm: ConfusionMatrix) -> ClassReport:
    return mean_metrics([class_metrics(cm, c) for c in range(cm.num_classes)], cm.num_classes)


def read_report_csv(text: str) -> ClassReport:
    rows = list(csv.reader(io.StringIO(text)))
    body = [r for r in rows[1:] if r and r[0] != "mean"]
    mean_row = next(r for r in rows[1:] if r and r[0] == "mean")
    rep = mean_metrics([tuple(float(v) for v in r[2:6]) for r in body], len(body))
    stored = tuple(float(v) for v in mean_row[2:6])
    return ClassReport(rep.precision, rep.recall, rep.f1, rep.iou, *stored)
