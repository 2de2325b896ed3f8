"""Penultimate-layer embeddings, their concatenation and a linear SVM on top."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .data import OccludedDataset
from .errors import ConsistencyError, DimensionError, TrainingError
from .model import NetworkSpec, ParameterSet, infer


@dataclass
class EmbeddingSet:
    matrix: np.ndarray  # [N, D]
    labels: np.ndarray  # [N]
    source: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        if self.matrix.ndim != 2:
            self.matrix = self.matrix.reshape(len(self.labels), -1)
        if len(self.matrix) != len(self.labels):
            raise ConsistencyError(f"{len(self.matrix)} embedding rows for {len(self.labels)} labels")

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    def __len__(self):
        return len(self.labels)


def extract_embeddings(params: ParameterSet, spec: NetworkSpec, dataset: OccludedDataset, source: str = "") -> EmbeddingSet:
    if tuple(dataset.image_shape) != spec.input_shape:
        raise DimensionError(f"dataset images {dataset.image_shape} do not match network input {spec.input_shape}")
    _, emb = infer(params, spec, dataset.images)
    return EmbeddingSet(emb, dataset.labels.copy(), source or f"{params.role}:{dataset.split}")


def concat_embeddings(a: EmbeddingSet, b: EmbeddingSet) -> EmbeddingSet:
    """Row-wise [a_i | b_i]; both sets must list the same images in the same order."""
    if len(a) != len(b) or not np.array_equal(a.labels, b.labels):
        raise ConsistencyError("embedding sets disagree on images or labels")
    dtype = np.result_type(a.matrix.dtype, b.matrix.dtype)
    return EmbeddingSet(
        np.concatenate([a.matrix.astype(dtype, copy=False), b.matrix.astype(dtype, copy=False)], axis=1),
        a.labels,
        f"{a.source}+{b.source}",
    )


def save_embeddings_csv(path, emb: EmbeddingSet) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"e{j}" for j in range(emb.width)])
        for y, row in zip(emb.labels, emb.matrix):
            w.writerow([int(y)] + [format(float(v), ".9g") for v in row])
    return path


def load_embeddings_csv(path, source: str = "") -> EmbeddingSet:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[0] != "label":
        raise ConsistencyError(f"{path}: first column must be 'label'")
    labels = np.array([int(r[0]) for r in body], dtype=np.int64)
    mat = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), len(header) - 1)
    return EmbeddingSet(mat, labels, source or str(path))


# --------------------------------------------------------------------------
# one-vs-rest linear SVM
# --------------------------------------------------------------------------


@dataclass
class LinearSVMModel:
    weight: np.ndarray  # [K, D]
    bias: np.ndarray  # [K]
    C: float = 1.0
    classes: np.ndarray = None

    def __post_init__(self):
        if self.classes is None:
            self.classes = np.arange(len(self.bias))

    def scores(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise DimensionError(f"embeddings of width {x.shape[-1]} for a model of width {self.weight.shape[1]}")
        return x @ self.weight.T + self.bias

    def to_dict(self) -> dict:
        return {
            "weight": self.weight.tolist(),
            "bias": self.bias.tolist(),
            "C": self.C,
            "classes": [int(c) for c in self.classes],
        }

    @classmethod
    def from_dict(cls, d) -> "LinearSVMModel":
        return cls(np.asarray(d["weight"], float), np.asarray(d["bias"], float), float(d["C"]), np.asarray(d["classes"]))


def train_linear_svm(
    train: EmbeddingSet, C: float = 1.0, iterations: int = 1000, seed: int = 0, tol: float = 0.1
) -> LinearSVMModel:
    """One-vs-rest L2-regularised hinge SVM, solved by dual coordinate descent.

    Each class k solves min 1/2 (|w_k|^2 + b_k^2) + C * sum_i max(0, 1 - s_ik (w_k.x_i + b_k))
    with s_ik = +1 for class k and -1 otherwise; the bias is the weight of a
    constant unit feature. ``iterations`` caps the passes over the data and
    ``seed`` fixes the order in which samples are visited, so training is
    deterministic.
    """
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise TrainingError("an SVM needs at least two classes")
    x = np.ascontiguousarray(train.matrix, dtype=np.float64)
    order = np.random.default_rng(seed).permutation(len(x))
    weights, biases = [], []
    for c in classes:
        signs = np.where(train.labels == c, 1.0, -1.0)
        w, b, _ = kernels.svm_dual_cd(x, signs, C, 1.0, order, iterations, tol)
        weights.append(w)
        biases.append(b)
    return LinearSVMModel(np.array(weights), np.array(biases), float(C), classes)


def svm_predict(model: LinearSVMModel, embeddings) -> np.ndarray:
    """Class with the highest score; ties go to the lowest class id."""
    x = embeddings.matrix if isinstance(embeddings, EmbeddingSet) else embeddings
    return model.classes[np.argmax(model.scores(x), axis=1)]


def save_svm(path, model: LinearSVMModel) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model.to_dict(), sort_keys=True), encoding="utf-8")
    return path
