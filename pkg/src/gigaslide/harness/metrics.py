"""Slide-level classification metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


def roc_curve(labels, scores) -> list[tuple[float, float]]:
    """ROC points (fpr, tpr) sweeping the threshold down through the distinct scores.

    Tied scores move in one step, so a tie between classes becomes a
    diagonal segment. Starts at (0, 0), ends at (1, 1). Requires both
    classes.
    """
    y = np.asarray(labels).astype(int)
    s = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        tp += int(y[i:j].sum())
        fp += int((j - i) - y[i:j].sum())
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return points


def auc_trapezoid(points) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def roc_auc(labels, scores) -> float | None:
    """Trapezoidal AUC, or None when only one class is present."""
    y = np.asarray(labels).astype(int)
    if y.size == 0 or y.min() == y.max():
        return None
    return auc_trapezoid(roc_curve(y, scores))


def pairwise_auc(labels, scores) -> float | None:
    """P(score_pos > score_neg) + P(tie) / 2 by direct enumeration."""
    y = np.asarray(labels).astype(int)
    s = np.asarray(scores, dtype=np.float64)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        return None
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def pearson(x, y) -> float | None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


@dataclass
class Confusion:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    def as_dict(self) -> dict:
        return asdict(self)


def confusion_metrics(labels, scores, threshold: float = 0.5) -> Confusion:
    """Threshold metrics; a score at the threshold counts as positive."""
    y = np.asarray(labels).astype(int)
    pred = (np.asarray(scores) >= threshold).astype(int)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    tn = int(((pred == 0) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    n = max(len(y), 1)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Confusion((tp + tn) / n, precision, recall, f1, tp, fp, tn, fn)
