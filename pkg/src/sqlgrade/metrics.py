"""Evaluation statistics: ROC/AUC, confusion matrices, PR/AP, regression and mistakes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


@dataclass(frozen=True)
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    average_precision: float


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # counts[actual, predicted]
    labels: tuple

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ResidualSummary:
    residuals: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray
    mean: float
    skewness: float


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return y.astype(int)


def _sweep(scores, labels):
    """Cumulative TP/FP counts at each distinct score, highest first."""
    s = np.asarray(scores, dtype=float)
    y = _binary(labels)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # index of the last element of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp, fp


def roc_auc(scores, labels) -> RocCurve:
    y = _binary(labels)
    P = int(y.sum())
    N = y.size - P
    if P == 0 or N == 0:
        raise UndefinedMetricError("ROC AUC needs both classes present")
    thr, tp, fp = _sweep(scores, y)
    tpr = np.r_[0.0, tp / P]
    fpr = np.r_[0.0, fp / N]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, np.r_[np.inf, thr], auc)


def precision_recall(scores, labels) -> PrCurve:
    """PR sweep over descending thresholds; AP = Σ (R_n − R_{n−1}) P_n.

    The curve starts at (recall 0, precision 1).
    """
    y = _binary(labels)
    P = int(y.sum())
    if P == 0:
        raise UndefinedMetricError("precision/recall needs at least one positive")
    thr, tp, fp = _sweep(scores, y)
    precision = tp / (tp + fp)
    recall = tp / P
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return PrCurve(np.r_[0.0, recall], np.r_[1.0, precision], np.r_[np.inf, thr], ap)


def confusion(preds, actuals, classes) -> ConfusionMatrix:
    classes = tuple(classes)
    preds, actuals = list(preds), list(actuals)
    if len(preds) != len(actuals):
        raise ValueError(f"{len(preds)} predictions vs {len(actuals)} actual labels")
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, a in zip(preds, actuals):
        if p not in index or a not in index:
            raise ValueError(f"label outside class set {classes}: predicted {p!r}, actual {a!r}")
        counts[index[a], index[p]] += 1
    return ConfusionMatrix(counts, classes)


def per_class_recall(cm: ConfusionMatrix) -> np.ndarray:
    support = cm.counts.sum(axis=1)
    if np.any(support == 0):
        missing = [cm.labels[i] for i in np.nonzero(support == 0)[0]]
        raise UndefinedMetricError(f"no actual examples for class(es) {missing}")
    return np.diag(cm.counts) / support


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    return float(per_class_recall(cm).mean())


def regression_report(y, yhat, bins: int = 20):
    """Returns (mae, rmse, r2, ResidualSummary); r2 is None when y is constant."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.size == 0:
        raise ValueError("y and yhat must be nonempty and equally long")
    res = y - yhat
    mae = float(np.abs(res).mean())
    rmse = float(np.sqrt((res**2).mean()))
    sst = float(((y - y.mean()) ** 2).sum())
    r2 = None if sst == 0.0 else 1.0 - float((res**2).sum()) / sst
    counts, edges = np.histogram(res, bins=bins)
    centered = res - res.mean()
    m2 = float((centered**2).mean())
    skew = 0.0 if m2 == 0.0 else float((centered**3).mean()) / m2**1.5
    return mae, rmse, r2, ResidualSummary(res, edges, counts, float(res.mean()), skew)


def r2_score(y, yhat) -> float:
    r2 = regression_report(y, yhat)[2]
    if r2 is None:
        raise UndefinedMetricError("r2 is undefined when y has zero variance")
    return r2


@dataclass(frozen=True)
class Mistake:
    submission_id: str
    p_correct: float
    label: int
    confidence: float


def rank_mistakes(submission_ids, p_correct, labels, threshold: float = 0.5) -> list[Mistake]:
    """Misclassified examples, most uncertain first (ties by submission id)."""
    out = []
    for sid, p, y in zip(submission_ids, p_correct, labels):
        if int(p >= threshold) != int(y):
            out.append(Mistake(sid, float(p), int(y), abs(float(p) - threshold)))
    out.sort(key=lambda m: (m.confidence, m.submission_id))
    return out
