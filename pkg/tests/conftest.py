import json

import numpy as np
import pytest

from occdistill.data import OccludedDataset, write_idx
from occdistill.model import Conv, Dense, MaxPool, NetworkSpec, ReLU


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_spec(k=3, shape=(1, 8, 8), emb=8):
    return NetworkSpec(
        shape,
        k,
        (Conv(4), ReLU(), MaxPool(2), Conv(4), ReLU(), MaxPool(2), Dense(emb), ReLU(), Dense(k)),
    )


def toy_dataset(n_per_class=6, k=3, shape=(1, 8, 8), seed=0, split="train"):
    """Classes differ by which quadrant is bright, so a tiny CNN can learn them fast."""
    r = np.random.default_rng(seed)
    c, h, w = shape
    imgs, labels = [], []
    for cls in range(k):
        for _ in range(n_per_class):
            x = r.uniform(0, 0.2, shape)
            y0 = (cls // 2) * (h // 2)
            x0 = (cls % 2) * (w // 2)
            x[:, y0 : y0 + h // 2, x0 : x0 + w // 2] += 0.7
            imgs.append(np.clip(x, 0, 1))
            labels.append(cls)
    return OccludedDataset(np.array(imgs, dtype=np.float32), np.array(labels), split=split, num_classes=k)


PHASES = {k: {"epochs": 1, "lr": 0.05} for k in ("teacher", "student", "kd", "triplet")}


def write_idx_pair(d, ds, prefix):
    imgs = np.round(ds.images[:, 0] * 255).astype(np.uint8)
    write_idx(d / f"{prefix}-images.gz", imgs)
    write_idx(d / f"{prefix}-labels.gz", ds.labels.astype(np.uint8))


def make_config(d, name, **extra):
    cfg = {
        "seed": 3,
        "output_dir": "out",
        "data": {"train_images": "train-images.gz", "train_labels": "train-labels.gz",
                 "test_images": "test-images.gz", "test_labels": "test-labels.gz"},
        "validation_fraction": 0.2,
        "network": {"embedding_dim": 8},
        "batch_size": 8,
        "phases": PHASES,
        "svm": {"iterations": 200},
    }
    cfg.update(extra)
    path = d / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return path
