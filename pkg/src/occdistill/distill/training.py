"""Training loops: plain cross-entropy, soft-target distillation and triplet distillation.

All loops share the same mechanics: mini-batch SGD with momentum, an epoch
permutation drawn from ``(seed, epoch)``, plateau-based learning-rate decay on
the validation error and selection of the best-validation-accuracy weights.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..data import OccludedDataset
from ..errors import DatasetError, IncompatibilityError
from ..model import (
    NetworkSpec,
    OptimizerState,
    ParameterSet,
    decay_on_plateau,
    forward,
    infer,
    init_params,
    sgd_momentum_step,
)
from ..tensor import Tape, Tensor, backward
from .losses import KDConfig, TripletConfig, TripletTerms, combined_kd_triplet_loss, hard_cross_entropy, kd_loss
from .mining import check_aligned, mine_epoch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    patience: int = 10
    decay_factor: float = 0.1


class MetricsLog:
    """Per-epoch rows kept in memory and optionally appended to a JSON-lines file."""

    def __init__(self, path: Optional[Path] = None):
        self.rows: list = []
        self.path = Path(path) if path is not None else None

    def append(self, row: dict):
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    params: ParameterSet
    state: OptimizerState
    metrics: list
    best_epoch: int
    best_val_accuracy: float


def accuracy(params: ParameterSet, spec: NetworkSpec, dataset: OccludedDataset, batch_size: int = 256) -> float:
    logits, _ = infer(params, spec, dataset.images, batch_size)
    return float(np.mean(logits.argmax(axis=1) == dataset.labels))


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def _require_data(*datasets):
    for d in datasets:
        if d is None or len(d) == 0:
            raise DatasetError("training needs non-empty train and validation sets")


def _fit(
    params: ParameterSet,
    spec: NetworkSpec,
    n_train: int,
    batch_loss: Callable,
    val: OccludedDataset,
    cfg: TrainConfig,
    seed: int,
    metrics: Optional[MetricsLog],
    epoch_hook: Optional[Callable] = None,
) -> TrainResult:
    """Generic loop. ``batch_loss(indices, epoch_ctx)`` returns a scalar loss Tensor."""
    metrics = metrics if metrics is not None else MetricsLog()
    state = OptimizerState(cfg.lr, cfg.momentum)
    tensors = params.tensors()
    best, best_acc, best_epoch = params.copy(), -1.0, 0
    for epoch in range(1, cfg.epochs + 1):
        ctx = epoch_hook(epoch) if epoch_hook else {}
        order = _epoch_order(seed, epoch, n_train)
        total = 0.0
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            with Tape() as tape:
                loss = batch_loss(idx, ctx)
            grads = backward(tape, loss, wrt=tensors)
            sgd_momentum_step(params, grads, state)
            total += loss.item() * len(idx)
        val_acc = accuracy(params, spec, val)
        row = {"epoch": epoch, "train_loss": total / n_train, "val_accuracy": val_acc, "lr": state.lr}
        row.update(ctx.get("metrics", {}))
        decay_on_plateau(state, 1.0 - val_acc, cfg.patience, cfg.decay_factor)
        if val_acc > best_acc:
            best, best_acc, best_epoch = params.copy(), val_acc, epoch
        metrics.append(row)
        log.info("epoch %d: %s", epoch, row)
    return TrainResult(best, state, metrics.rows, best_epoch, best_acc)


def train_cross_entropy(
    params: ParameterSet,
    spec: NetworkSpec,
    train: OccludedDataset,
    val: OccludedDataset,
    cfg: TrainConfig,
    seed: int,
    metrics: Optional[MetricsLog] = None,
) -> TrainResult:
    """Cross-entropy training starting from ``params`` (modified in place)."""
    _require_data(train, val)
    x, y = train.images, train.labels

    def batch_loss(idx, _):
        logits, _emb = forward(params, spec, x[idx])
        return hard_cross_entropy(logits, y[idx])

    return _fit(params, spec, len(train), batch_loss, val, cfg, seed, metrics)


def train_teacher(spec, visible_train, visible_val, cfg: TrainConfig = TrainConfig(), seed: int = 0, metrics=None):
    """Teacher trained from scratch on fully-visible images."""
    _require_data(visible_train, visible_val)
    params = init_params(spec, seed, role="teacher")
    result = train_cross_entropy(params, spec, visible_train, visible_val, cfg, seed, metrics)
    result.params.role = "teacher"
    return result


def train_student_baseline(spec, occluded_train, occluded_val, cfg: TrainConfig = TrainConfig(), seed: int = 0, metrics=None):
    """Student trained from scratch on occluded images only."""
    _require_data(occluded_train, occluded_val)
    params = init_params(spec, seed, role="student")
    return train_cross_entropy(params, spec, occluded_train, occluded_val, cfg, seed, metrics)


def _frozen_check(student_init: ParameterSet, teacher: ParameterSet, spec: NetworkSpec):
    if student_init.fingerprint != teacher.fingerprint or teacher.fingerprint != spec.fingerprint:
        raise IncompatibilityError("teacher and student must share the network architecture")


def train_student_kd(
    student_init: ParameterSet,
    teacher: ParameterSet,
    spec: NetworkSpec,
    occluded_train: OccludedDataset,
    visible_train: OccludedDataset,
    occluded_val: OccludedDataset,
    kd: KDConfig = KDConfig(),
    cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    metrics=None,
) -> TrainResult:
    """Soft-target distillation; the teacher sees the aligned fully-visible images.

    ``student_init`` is copied, never modified. The teacher is only read.
    """
    _frozen_check(student_init, teacher, spec)
    _require_data(occluded_train, occluded_val)
    check_aligned(occluded_train, visible_train)
    params = student_init.copy(role="student")
    teacher_logits, _ = infer(teacher, spec, visible_train.images)
    x, y = occluded_train.images, occluded_train.labels

    def batch_loss(idx, _):
        logits, _emb = forward(params, spec, x[idx])
        return kd_loss(logits, teacher_logits[idx], y[idx], kd)

    return _fit(params, spec, len(occluded_train), batch_loss, occluded_val, cfg, seed, metrics)


def train_student_triplet(
    student_init: ParameterSet,
    teacher: ParameterSet,
    spec: NetworkSpec,
    occluded_train: OccludedDataset,
    visible_train: OccludedDataset,
    occluded_val: OccludedDataset,
    triplet: TripletConfig = TripletConfig(),
    cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    metrics=None,
) -> TrainResult:
    """Triplet distillation with a frozen teacher, mining once per epoch.

    Each mini-batch holds anchors and their negatives; both pass through the
    student, so gradients reach the student via anchor and negative
    embeddings. Positive embeddings come from the teacher and stay fixed.
    """
    _frozen_check(student_init, teacher, spec)
    _require_data(occluded_train, occluded_val)
    check_aligned(occluded_train, visible_train)
    params = student_init.copy(role="student")
    _, teacher_emb = infer(teacher, spec, visible_train.images)
    x, y = occluded_train.images, occluded_train.labels

    def epoch_hook(epoch):
        mined = mine_epoch(params, teacher, spec, occluded_train, visible_train, triplet, seed, epoch, teacher_emb)
        return {
            "mined": mined,
            "metrics": {
                "mean_d_pos": float(mined.d_pos.mean()),
                "mean_d_neg": float(mined.d_neg.mean()),
            },
        }

    def batch_loss(idx, ctx):
        mined = ctx["mined"]
        neg = mined.negative[idx]
        b = len(idx)
        logits, emb = forward(params, spec, np.concatenate([x[idx], x[neg]]))
        terms = TripletTerms(emb[:b], teacher_emb[mined.positive[idx]], emb[b:])
        return combined_kd_triplet_loss(logits[:b], y[idx], terms, triplet)

    return _fit(params, spec, len(occluded_train), batch_loss, occluded_val, cfg, seed, metrics, epoch_hook)
