"""Accuracy reports and the paired McNemar test."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .data import OccludedDataset
from .errors import ConsistencyError, DatasetError
from .model import NetworkSpec, ParameterSet, infer

CHI2_1DOF_05 = 3.8415  # chi-square critical value, 1 dof, level 0.05


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray  # rows: true class, columns: predicted class
    per_class: np.ndarray
    n: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "per_class": [None if np.isnan(v) else float(v) for v in self.per_class],
            "n": self.n,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def report_from_predictions(predictions, labels, num_classes: Optional[int] = None) -> EvalReport:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise DatasetError("cannot evaluate on an empty dataset")
    if len(predictions) != len(labels):
        raise ConsistencyError(f"{len(predictions)} predictions for {len(labels)} labels")
    k = num_classes or int(max(predictions.max(), labels.max())) + 1
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(confusion) / np.maximum(support, 1), np.nan)
    return EvalReport(float(np.trace(confusion) / len(labels)), confusion, per_class, int(len(labels)))


def predict(params: ParameterSet, spec: NetworkSpec, dataset: OccludedDataset, batch_size: int = 256) -> np.ndarray:
    if len(dataset) == 0:
        raise DatasetError("cannot predict on an empty dataset")
    logits, _ = infer(params, spec, dataset.images, batch_size)
    return logits.argmax(axis=1)


def evaluate(params: ParameterSet, spec: NetworkSpec, dataset: OccludedDataset) -> EvalReport:
    """Argmax-of-logits accuracy and confusion matrix."""
    return report_from_predictions(predict(params, spec, dataset), dataset.labels, spec.num_classes)


@dataclass
class McNemarResult:
    b: int  # A correct, B wrong
    c: int  # A wrong, B correct
    statistic: Optional[float]
    significant: bool
    level: float = 0.05
    reason: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


def mcnemar_test(preds_a, preds_b, labels, level: float = 0.05) -> McNemarResult:
    """Continuity-corrected McNemar test, (|b - c| - 1)^2 / (b + c), against chi-square(1).

    Significance is decided against the tabulated 0.05 critical value 3.8415;
    other levels use the chi-square quantile.
    """
    a = np.asarray(preds_a)
    b_ = np.asarray(preds_b)
    y = np.asarray(labels)
    if not (len(a) == len(b_) == len(y)) or len(y) == 0:
        raise ConsistencyError("prediction vectors and labels must have equal, non-zero length")
    ok_a, ok_b = a == y, b_ == y
    b = int(np.sum(ok_a & ~ok_b))
    c = int(np.sum(~ok_a & ok_b))
    if b + c == 0:
        return McNemarResult(b, c, None, False, level, "no discordant pairs; statistic undefined")
    stat = (abs(b - c) - 1) ** 2 / (b + c)
    if level == 0.05:
        critical = CHI2_1DOF_05
    else:
        from scipy.stats import chi2

        critical = float(chi2.ppf(1 - level, 1))
    return McNemarResult(b, c, float(stat), bool(stat > critical), level)
