"""Confusion matrices and macro-averaged classification metrics (percent)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class MetricsReport:
    confusion: np.ndarray
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray

    def as_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        return d

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1}


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are actual classes, columns predicted."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def _safe_div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a, dtype=np.float64)
    np.divide(a, b, out=out, where=b != 0)
    return out


def compute_metrics(confusion) -> MetricsReport:
    """One-vs-rest TP/FP/FN per class, macro averages.

    F1 is the harmonic mean of macro precision and macro recall.  A class
    with an empty denominator contributes 0 to the macro mean.
    """
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.size == 0:
        raise ValueError(f"confusion matrix must be square and non-empty, got shape {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion matrix has negative entries")
    total = cm.sum()
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    prec = _safe_div(tp, tp + fp)
    rec = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * prec * rec, prec + rec)
    P, R = prec.mean(), rec.mean()
    macro_f1 = 2 * P * R / (P + R) if P + R > 0 else 0.0
    return MetricsReport(
        confusion=np.asarray(confusion),
        accuracy=100.0 * tp.sum() / total,
        precision=100.0 * prec.mean(),
        recall=100.0 * rec.mean(),
        f1=100.0 * macro_f1,
        per_class_precision=100.0 * prec,
        per_class_recall=100.0 * rec,
        per_class_f1=100.0 * f1,
    )
