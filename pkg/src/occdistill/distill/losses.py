"""Soft-target and triplet distillation objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..errors import ContractError, DimensionError, DomainError, ParameterError
from ..tensor import Tensor, log, relu, softmax, softmax_with_temperature, sqrt

EPS = 1e-12


@dataclass(frozen=True)
class KDConfig:
    lambda_kd: float = 0.7
    tau: float = 20.0

    def __post_init__(self):
        if not 0 <= self.lambda_kd <= 1:
            raise ParameterError(f"lambda_kd must lie in [0, 1], got {self.lambda_kd}")
        if not self.tau > 1:
            raise ParameterError(f"tau must exceed 1, got {self.tau}")


@dataclass(frozen=True)
class TripletConfig:
    alpha: float = 0.1
    lambda_triplet: float = 0.5
    subset_fraction: float = 0.1

    def __post_init__(self):
        if self.alpha < 0 or self.lambda_triplet < 0:
            raise ParameterError("alpha and lambda_triplet must be non-negative")
        if not 0 < self.subset_fraction <= 1:
            raise ParameterError(f"subset_fraction must lie in (0, 1], got {self.subset_fraction}")


class TripletTerms(NamedTuple):
    """Embeddings for one batch of triplets; ``positive`` is treated as constant."""

    anchor: Tensor
    positive: object
    negative: Tensor


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def _rows(t: Tensor) -> Tensor:
    return t.reshape(1, -1) if t.ndim == 1 else t


def _constant(x, dtype) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dtype)


def cross_entropy(probabilities: Tensor, targets) -> Tensor:
    """Batch mean of -sum(target * log(p + 1e-12)).

    ``targets`` is a [B, K] distribution (constant) or a length-B label vector.
    """
    p = _rows(probabilities)
    if np.any(p.data < 0):
        raise DomainError("probabilities must be non-negative")
    if not np.allclose(p.data.sum(axis=1), 1.0, rtol=0, atol=1e-5):
        raise ContractError("probability rows must sum to 1")
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if np.issubdtype(t.dtype, np.integer):
        t = one_hot(t, p.shape[1], p.dtype)
    t = t.astype(p.dtype, copy=False)
    if t.ndim == 1:
        t = t.reshape(1, -1)
    if t.shape != p.shape:
        raise DimensionError(f"targets {t.shape} do not match probabilities {p.shape}")
    return -(Tensor(t) * log(p + EPS)).sum() * (1.0 / p.shape[0])


def hard_cross_entropy(logits: Tensor, labels) -> Tensor:
    logits = _rows(logits)
    return cross_entropy(softmax(logits), one_hot(labels, logits.shape[1], logits.dtype))


def kd_loss(student_logits: Tensor, teacher_logits, labels, cfg: KDConfig = KDConfig()) -> Tensor:
    """(1 - lambda) * CE(y, softmax(A_S)) + lambda * CE(softmax(A_T/tau), softmax(A_S/tau)).

    Teacher logits are used as constants, so no gradient reaches the teacher.
    """
    a_s = _rows(student_logits)
    a_t = _constant(teacher_logits, a_s.dtype)
    a_t = a_t.reshape(1, -1) if a_t.ndim == 1 else a_t
    if a_t.shape != a_s.shape:
        raise DimensionError(f"student logits {a_s.shape} vs teacher logits {a_t.shape}")
    soft_targets = softmax_with_temperature(Tensor(a_t), cfg.tau).data
    hard = hard_cross_entropy(a_s, labels)
    soft = cross_entropy(softmax_with_temperature(a_s, cfg.tau), soft_targets)
    return hard * (1.0 - cfg.lambda_kd) + soft * cfg.lambda_kd


def euclidean_distance(u, v) -> Tensor:
    """sqrt(sum((u - v)^2) + 1e-12) along the last axis; smooth at u == v."""
    u = u if isinstance(u, Tensor) else Tensor(u)
    v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=u.dtype))
    if u.shape[-1:] != v.shape[-1:] or (u.ndim == v.ndim == 2 and u.shape[0] != v.shape[0]):
        raise DimensionError(f"distance between shapes {u.shape} and {v.shape}")
    d = u - v
    return sqrt((d * d).sum(axis=-1) + EPS)


def triplet_distances(anchor: Tensor, positive, negative: Tensor):
    anchor, negative = _rows(anchor), _rows(negative)
    pos = _constant(positive, anchor.dtype)
    pos = pos.reshape(1, -1) if pos.ndim == 1 else pos
    if not (anchor.shape[0] == pos.shape[0] == negative.shape[0]):
        raise ContractError(
            f"triplet batch lengths differ: {anchor.shape[0]}, {pos.shape[0]}, {negative.shape[0]}"
        )
    return euclidean_distance(anchor, Tensor(pos)), euclidean_distance(anchor, negative)


def triplet_loss(anchor: Tensor, positive, negative: Tensor, alpha: float = 0.1) -> Tensor:
    """sum_i [d(a_i, p_i) - d(a_i, n_i) + alpha]_+ with the positives held fixed."""
    d_pos, d_neg = triplet_distances(anchor, positive, negative)
    return relu(d_pos - d_neg + alpha).sum()


def combined_kd_triplet_loss(logits: Tensor, labels, triplet_terms: TripletTerms, cfg: TripletConfig = TripletConfig()):
    """CE(y, softmax(A_S)) + lambda * triplet loss."""
    ce = hard_cross_entropy(logits, labels)
    trip = triplet_loss(triplet_terms.anchor, triplet_terms.positive, triplet_terms.negative, cfg.alpha)
    return ce + trip * cfg.lambda_triplet
