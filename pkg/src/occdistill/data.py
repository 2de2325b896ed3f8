"""IDX datasets, synthetic half-image occlusion and stratified splitting."""

from __future__ import annotations

import enum
import gzip
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConsistencyError, ContractError, DatasetError, FormatError, ParameterError, StratificationError

log = logging.getLogger(__name__)

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class OcclusionMode(str, enum.Enum):
    NONE = "none"
    UPPER_HALF_OCCLUDED = "upper_half_occluded"  # only the lower half stays visible
    LOWER_HALF_OCCLUDED = "lower_half_occluded"  # only the upper half stays visible


@dataclass(frozen=True)
class OccludedDataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    mode: OcclusionMode = OcclusionMode.NONE
    split: str = "all"
    num_classes: Optional[int] = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ContractError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")
        k = self.num_classes
        if k is None:
            k = int(self.labels.max()) + 1 if len(self.labels) else 0
            object.__setattr__(self, "num_classes", k)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ConsistencyError(f"labels outside [0, {k})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, indices, split: Optional[str] = None) -> "OccludedDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx], split=split or self.split)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# --------------------------------------------------------------------------
# IDX I/O
# --------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims)) if dims else 0
    if len(raw) - header != size:
        raise FormatError(f"{path}: payload has {len(raw) - header} bytes, header declares {size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray, compress: Optional[bool] = None) -> Path:
    """Write a uint8 array as IDX (1-d labels or 3-d images). ``.gz`` paths are gzipped."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS, 3: IDX_IMAGES}.get(arr.ndim)
    if magic is None:
        raise ContractError(f"IDX writer supports 1-d or 3-d arrays, got {arr.ndim}-d")
    blob = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    if compress:
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)
    return path


def load_idx_dataset(images_path, labels_path, per_class_cap: Optional[int] = None, num_classes=None) -> OccludedDataset:
    """Load an MNIST-style image/label pair; pixels are scaled to [0, 1]."""
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS).astype(np.int64)
    if len(images) != len(labels):
        raise ConsistencyError(f"{images_path} has {len(images)} images, {labels_path} has {len(labels)} labels")
    if per_class_cap is not None:
        if per_class_cap < 1:
            raise DatasetError(f"per-class cap {per_class_cap} leaves an empty dataset")
        keep = np.zeros(len(labels), dtype=bool)
        seen = {}
        for i, y in enumerate(labels):
            if seen.get(y, 0) < per_class_cap:
                keep[i] = True
                seen[y] = seen.get(y, 0) + 1
        images, labels = images[keep], labels[keep]
    if len(labels) == 0:
        raise DatasetError(f"{images_path}: no images")
    x = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return OccludedDataset(x, labels, OcclusionMode.NONE, "all", num_classes)


# --------------------------------------------------------------------------
# occlusion and splitting
# --------------------------------------------------------------------------


def occlusion_rows(height: int, mode: OcclusionMode) -> slice:
    half = height // 2
    mode = OcclusionMode(mode)
    if mode is OcclusionMode.UPPER_HALF_OCCLUDED:
        return slice(0, half)
    if mode is OcclusionMode.LOWER_HALF_OCCLUDED:
        return slice(half, height)
    return slice(0, 0)


def apply_occlusion(dataset: OccludedDataset, mode) -> OccludedDataset:
    """Zero half of every image. The input dataset is left untouched."""
    mode = OcclusionMode(mode)
    if dataset.mode is not OcclusionMode.NONE:
        raise ContractError(f"dataset is already occluded ({dataset.mode.value})")
    images = dataset.images.copy()
    images[:, :, occlusion_rows(images.shape[2], mode), :] = 0
    return replace(dataset, images=images, mode=mode)


def split(dataset: OccludedDataset, validation_fraction: float, seed: int):
    """Stratified (train, validation) split, deterministic for a given seed."""
    train_idx, val_idx = split_indices(dataset.labels, validation_fraction, seed)
    return dataset.subset(train_idx, "train"), dataset.subset(val_idx, "validation")


def split_indices(labels: np.ndarray, validation_fraction: float, seed: int):
    if not 0 < validation_fraction < 1:
        raise ParameterError(f"validation fraction must lie in (0, 1), got {validation_fraction}")
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < 2:
            raise StratificationError(f"class {c} has {len(members)} sample(s); a stratified split needs 2")
        n_val = min(max(int(round(validation_fraction * len(members))), 1), len(members) - 1)
        perm = rng.permutation(members)
        val.append(perm[:n_val])
        train.append(perm[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def resize_nearest(dataset: OccludedDataset, height: int, width: int) -> OccludedDataset:
    """Nearest-neighbour resize (unused by default; networks take native resolution)."""
    _, _, h, w = dataset.images.shape
    rows = np.minimum((np.arange(height) * h) // height, h - 1)
    cols = np.minimum((np.arange(width) * w) // width, w - 1)
    return replace(dataset, images=np.ascontiguousarray(dataset.images[:, :, rows][:, :, :, cols]))
