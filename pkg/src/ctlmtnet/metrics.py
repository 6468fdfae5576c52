"""Confusion-matrix metrics: weighted (WAR) and unweighted (UAR) average recall."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError


@dataclass(frozen=True)
class EvalReport:
    confusion: np.ndarray  # rows = truth, columns = prediction
    war: float  # overall accuracy, i.e. recall weighted by class frequency
    uar: float  # mean per-class recall over classes present in the truth

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    def per_class_recall(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.confusion) / rows, np.nan)

    def as_dict(self) -> dict:
        return {"war": self.war, "uar": self.uar, "confusion": self.confusion.tolist()}


def confusion_matrix(predictions, truths, num_classes: int) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    truths = np.asarray(truths, dtype=np.int64).reshape(-1)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (truths, predictions), 1)
    return cm


def report_from_confusion(cm: np.ndarray) -> EvalReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ContractError("confusion matrix is empty")
    rows = cm.sum(axis=1)
    present = rows > 0
    recalls = np.diag(cm)[present] / rows[present]
    return EvalReport(confusion=cm, war=float(np.trace(cm) / total), uar=float(recalls.mean()))


def evaluate(predictions, truths, num_classes: int) -> EvalReport:
    predictions = np.asarray(predictions).reshape(-1)
    truths = np.asarray(truths).reshape(-1)
    if predictions.size == 0:
        raise ContractError("cannot evaluate an empty prediction set")
    if predictions.size != truths.size:
        raise ContractError(f"{predictions.size} predictions for {truths.size} truths")
    for name, arr in (("predictions", predictions), ("truths", truths)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ContractError(f"{name} fall outside [0, {num_classes})")
    return report_from_confusion(confusion_matrix(predictions, truths, num_classes))
