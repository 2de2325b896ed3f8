"""Per-epoch triplet generation.

Every occluded training image becomes an anchor. Its positive is the
fully-visible same-class image whose teacher embedding lies farthest from the
anchor's student embedding; its negative is the different-class occluded image
whose student embedding lies closest. Both searches run over a random subset of
the training set (``subset_fraction`` of it), drawn independently per anchor
from one stream seeded by ``(seed, epoch)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..data import OccludedDataset, OcclusionMode
from ..errors import ConsistencyError, DatasetError, IncompatibilityError
from ..model import NetworkSpec, ParameterSet, infer
from .losses import EPS, TripletConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Triplet:
    anchor_index: int
    positive_index: int
    negative_index: int
    epoch: int


@dataclass
class MinedTriplets:
    """Array form of one epoch's triplets plus their distances at mining time."""

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    d_pos: np.ndarray
    d_neg: np.ndarray
    epoch: int
    fallbacks: int = 0

    def __len__(self):
        return len(self.anchor)

    def to_list(self) -> list:
        return [Triplet(int(a), int(p), int(n), self.epoch) for a, p, n in zip(self.anchor, self.positive, self.negative)]


def _csr(groups):
    offsets = np.zeros(len(groups) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(g) for g in groups])
    flat = np.concatenate(groups).astype(np.int64) if groups else np.zeros(0, np.int64)
    return flat, offsets


def candidate_sets(labels: np.ndarray, subset_fraction: float, rng: np.random.Generator):
    """Positive and negative candidate index lists for every anchor.

    Returns two CSR pairs ``(flat, offsets)`` and the number of anchors whose
    sampled subset held no same-class (or no other-class) image and fell back
    to the full pool.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    classes = np.unique(labels)
    same_pool = {c: np.flatnonzero(labels == c) for c in classes}
    other_pool = {c: np.flatnonzero(labels != c) for c in classes}
    for c in classes:
        if len(other_pool[c]) == 0:
            raise DatasetError("triplet mining needs at least two classes")
    k = min(n, max(1, math.ceil(subset_fraction * n)))
    pos_groups, neg_groups, fallbacks = [], [], 0
    full = k >= n
    for i in range(n):
        c = labels[i]
        if full:
            pos_groups.append(same_pool[c])
            neg_groups.append(other_pool[c])
            continue
        s_pos = rng.choice(n, size=k, replace=False)
        s_neg = rng.choice(n, size=k, replace=False)
        pos = s_pos[labels[s_pos] == c]
        neg = s_neg[labels[s_neg] != c]
        if len(pos) == 0:
            pos = same_pool[c]
            fallbacks += 1
        if len(neg) == 0:
            neg = other_pool[c]
            fallbacks += 1
        pos_groups.append(pos)
        neg_groups.append(neg)
    if fallbacks:
        log.info("triplet mining: %d subset(s) lacked candidates; used the full pool", fallbacks)
    return _csr(pos_groups), _csr(neg_groups), fallbacks


def mine_from_embeddings(
    student_emb: np.ndarray,
    teacher_emb: np.ndarray,
    labels: np.ndarray,
    subset_fraction: float,
    rng: np.random.Generator,
    epoch: int = 0,
) -> MinedTriplets:
    """Mine triplets given student embeddings of occluded images and teacher
    embeddings of the aligned fully-visible images."""
    if len(student_emb) != len(labels) or len(teacher_emb) != len(labels):
        raise ConsistencyError("embedding and label counts differ")
    (pflat, poff), (nflat, noff), fallbacks = candidate_sets(labels, subset_fraction, rng)
    pos, dpos = kernels.extreme_candidates(student_emb, teacher_emb, pflat, poff, True)
    neg, dneg = kernels.extreme_candidates(student_emb, student_emb, nflat, noff, False)
    return MinedTriplets(
        np.arange(len(labels), dtype=np.int64),
        pos,
        neg,
        np.sqrt(dpos + EPS),
        np.sqrt(dneg + EPS),
        epoch,
        fallbacks,
    )


def mining_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch), 0x7219])


def check_aligned(occluded: OccludedDataset, visible: OccludedDataset):
    if len(occluded) != len(visible) or not np.array_equal(occluded.labels, visible.labels):
        raise ConsistencyError("occluded and fully-visible training sets are not index-aligned")
    if visible.mode is not OcclusionMode.NONE:
        raise ConsistencyError(f"teacher view must be fully visible, got {visible.mode.value}")


def mine_epoch(
    student: ParameterSet,
    teacher: ParameterSet,
    spec: NetworkSpec,
    occluded_train: OccludedDataset,
    visible_train: OccludedDataset,
    cfg: TripletConfig,
    seed: int,
    epoch: int,
    teacher_emb: np.ndarray = None,
    batch_size: int = 256,
) -> MinedTriplets:
    if student.fingerprint != teacher.fingerprint:
        raise IncompatibilityError("teacher and student architectures differ")
    check_aligned(occluded_train, visible_train)
    _, s_emb = infer(student, spec, occluded_train.images, batch_size)
    if teacher_emb is None:
        _, teacher_emb = infer(teacher, spec, visible_train.images, batch_size)
    return mine_from_embeddings(s_emb, teacher_emb, occluded_train.labels, cfg.subset_fraction, mining_rng(seed, epoch), epoch)


def mine_triplets(
    student_params: ParameterSet,
    teacher_params: ParameterSet,
    spec: NetworkSpec,
    occluded_train: OccludedDataset,
    visible_train: OccludedDataset,
    cfg: TripletConfig = TripletConfig(),
    seed: int = 0,
    epoch: int = 0,
) -> list:
    """One :class:`Triplet` per occluded training image."""
    return mine_epoch(student_params, teacher_params, spec, occluded_train, visible_train, cfg, seed, epoch).to_list()
