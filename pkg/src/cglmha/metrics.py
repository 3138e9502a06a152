"""Confusion-matrix metrics for binary classification."""
from dataclasses import asdict, dataclass
from typing import Dict, List

import numpy as np

from .errors import ContractError


def confusion_matrix(y_true, y_pred, num_classes: int = 2) -> np.ndarray:
    """``cm[i, j]`` counts examples of true class ``i`` predicted as ``j``."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ContractError("y_true and y_pred differ in length")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def from_counts(tp: int, fp: int, fn: int, tn: int) -> np.ndarray:
    """Binary confusion matrix with class 1 as the positive class."""
    return np.array([[tn, fp], [fn, tp]], dtype=np.int64)


def per_class(cm: np.ndarray):
    """Precision, recall and F1 per class.

    A ratio with a zero denominator is taken as 0, so a class that is never
    predicted and never present scores F1 = 0.
    """
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def macro_f1(cm) -> float:
    cm = np.asarray(cm)
    if np.any(cm < 0):
        raise ContractError("confusion counts must be nonnegative")
    if cm.sum() == 0:
        raise ContractError("macro F1 of an empty confusion matrix is undefined")
    return float(per_class(cm)[2].mean())


def accuracy(cm) -> float:
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise ContractError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm) / cm.sum())


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    precision: List[float]
    recall: List[float]
    f1: List[float]
    confusion: List[List[int]]
    n: int

    @classmethod
    def from_confusion(cls, cm):
        cm = np.asarray(cm, dtype=np.int64)
        p, r, f = per_class(cm)
        return cls(accuracy(cm), macro_f1(cm), p.tolist(), r.tolist(), f.tolist(), cm.tolist(), int(cm.sum()))

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes=2):
        return cls.from_confusion(confusion_matrix(y_true, y_pred, num_classes))

    def to_dict(self) -> Dict:
        return asdict(self)

    def summary(self) -> str:
        (tn, fp), (fn, tp) = self.confusion
        return (
            f"accuracy={self.accuracy:.4f} macro_f1={self.macro_f1:.4f} "
            f"(tp={tp} fp={fp} fn={fn} tn={tn}, n={self.n})"
        )
