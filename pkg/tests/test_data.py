import gzip
import struct

import numpy as np
import pytest

from occdistill.data import (
    OccludedDataset,
    OcclusionMode,
    apply_occlusion,
    load_idx_dataset,
    read_idx,
    resize_nearest,
    split,
    split_indices,
    write_idx,
)
from occdistill.errors import ConsistencyError, ContractError, DatasetError, FormatError, StratificationError


def _write_pair(tmp_path, images, labels, gz=False):
    suffix = ".gz" if gz else ""
    ip = write_idx(tmp_path / f"img{suffix}", images)
    lp = write_idx(tmp_path / f"lab{suffix}", labels)
    return ip, lp


@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip_and_scaling(tmp_path, rng, gz):
    imgs = rng.integers(0, 256, (7, 5, 4), dtype=np.uint8)
    labels = rng.integers(0, 3, 7).astype(np.uint8)
    ip, lp = _write_pair(tmp_path, imgs, labels, gz)
    ds = load_idx_dataset(ip, lp)
    assert ds.images.shape == (7, 1, 5, 4) and ds.images.dtype == np.float32
    assert ds.images.max() <= 1.0 and ds.mode is OcclusionMode.NONE
    np.testing.assert_array_equal(np.round(ds.images[:, 0] * 255).astype(np.uint8), imgs)
    np.testing.assert_array_equal(ds.labels, labels)


def test_idx_header_is_standard_big_endian(tmp_path):
    p = write_idx(tmp_path / "x", np.zeros((2, 3, 4), np.uint8))
    raw = p.read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03" and struct.unpack(">3I", raw[4:16]) == (2, 3, 4)
    p = write_idx(tmp_path / "y.gz", np.zeros(5, np.uint8))
    assert gzip.decompress(p.read_bytes())[:8] == b"\x00\x00\x08\x01\x00\x00\x00\x05"


def test_idx_errors(tmp_path):
    ip, lp = _write_pair(tmp_path, np.zeros((3, 2, 2), np.uint8), np.zeros(3, np.uint8))
    with pytest.raises(FormatError, match="magic"):
        read_idx(lp, 0x803)
    raw = ip.read_bytes()
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        read_idx(tmp_path / "short", 0x803)
    (tmp_path / "bad.gz").write_bytes(b"\x1f\x8bgarbage")
    with pytest.raises(FormatError):
        read_idx(tmp_path / "bad.gz", 0x803)
    lp2 = write_idx(tmp_path / "lab2", np.zeros(4, np.uint8))
    with pytest.raises(ConsistencyError):
        load_idx_dataset(ip, lp2)


def test_per_class_cap_counting_oracle(tmp_path, rng):
    labels = np.array([0] * 7 + [1] * 3, dtype=np.uint8)
    order = rng.permutation(10)
    labels = labels[order]
    imgs = np.arange(10, dtype=np.uint8)[:, None, None] * np.ones((1, 2, 2), np.uint8)
    ip, lp = _write_pair(tmp_path, imgs, labels)
    ds = load_idx_dataset(ip, lp, per_class_cap=5)
    # oracle: first 5 of class 0 and all of class 1, in file order
    expected, seen = [], {0: 0, 1: 0}
    for i, y in enumerate(labels):
        if seen[y] < 5:
            expected.append(i)
            seen[y] += 1
    assert dict(zip(*np.unique(ds.labels, return_counts=True))) == {0: 5, 1: 3}
    np.testing.assert_array_equal(np.round(ds.images[:, 0, 0, 0] * 255), expected)
    with pytest.raises(DatasetError):
        load_idx_dataset(ip, lp, per_class_cap=0)
    assert len(load_idx_dataset(ip, lp)) == 10


def _ds(images, labels=None):
    images = np.asarray(images, np.float32)
    return OccludedDataset(images, np.zeros(len(images), np.int64) if labels is None else np.asarray(labels))


def test_occlusion_examples():
    ds = _ds([[[[1, 2], [3, 4]]]])
    assert np.array_equal(apply_occlusion(ds, OcclusionMode.UPPER_HALF_OCCLUDED).images[0, 0], [[0, 0], [3, 4]])
    assert np.array_equal(apply_occlusion(ds, "lower_half_occluded").images[0, 0], [[1, 2], [0, 0]])
    odd = _ds(np.ones((1, 1, 3, 2)))
    assert np.array_equal(apply_occlusion(odd, OcclusionMode.UPPER_HALF_OCCLUDED).images[0, 0], [[0, 0], [1, 1], [1, 1]])
    assert np.array_equal(ds.images[0, 0], [[1, 2], [3, 4]])  # input untouched


def test_occlusion_invariants(rng):
    imgs = rng.uniform(0.1, 1, (4, 3, 9, 5)).astype(np.float32)
    ds = _ds(imgs)
    occ = apply_occlusion(ds, OcclusionMode.UPPER_HALF_OCCLUDED)
    assert occ.mode is OcclusionMode.UPPER_HALF_OCCLUDED
    assert int((occ.images == 0).sum()) == 4 * 3 * (9 // 2) * 5
    assert np.array_equal(occ.images[:, :, 4:], imgs[:, :, 4:])
    with pytest.raises(ContractError):
        apply_occlusion(occ, OcclusionMode.UPPER_HALF_OCCLUDED)


def test_split_examples():
    labels = np.zeros(10, np.int64)
    tr, va = split_indices(labels, 0.5, 0)
    assert len(tr) == len(va) == 5
    a = split_indices(np.repeat([0, 1, 2], 10), 0.3, 4)
    b = split_indices(np.repeat([0, 1, 2], 10), 0.3, 4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_split_is_stratified_disjoint_and_exhaustive(rng):
    labels = np.repeat([0, 1, 2], [12, 7, 21])
    rng.shuffle(labels)
    tr, va = split_indices(labels, 0.25, 9)
    assert len(np.intersect1d(tr, va)) == 0 and len(tr) + len(va) == len(labels)
    for c, n in zip(*np.unique(labels, return_counts=True)):
        assert abs(int(np.sum(labels[va] == c)) - 0.25 * n) <= 1


def test_split_errors():
    with pytest.raises(StratificationError):
        split_indices(np.array([0, 0, 1]), 0.5, 0)
    with pytest.raises(Exception):
        split_indices(np.array([0, 0, 1, 1]), 1.0, 0)


def test_occlude_and_split_commute(rng):
    imgs = rng.random((20, 1, 4, 4)).astype(np.float32)
    ds = _ds(imgs, np.repeat([0, 1], 10))
    tr1, va1 = split(apply_occlusion(ds, OcclusionMode.UPPER_HALF_OCCLUDED), 0.2, 3)
    tr2, va2 = split(ds, 0.2, 3)
    tr2, va2 = apply_occlusion(tr2, OcclusionMode.UPPER_HALF_OCCLUDED), apply_occlusion(va2, OcclusionMode.UPPER_HALF_OCCLUDED)
    assert np.array_equal(tr1.images, tr2.images) and np.array_equal(va1.labels, va2.labels)


def test_resize_nearest():
    ds = _ds([[[[1, 2], [3, 4]]]])
    out = resize_nearest(ds, 4, 4).images[0, 0]
    assert np.array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_dataset_validation():
    with pytest.raises(ConsistencyError):
        OccludedDataset(np.zeros((2, 1, 2, 2), np.float32), np.array([0, 3]), num_classes=2)
    with pytest.raises(ConsistencyError):
        OccludedDataset(np.zeros((2, 1, 2, 2), np.float32), np.array([0]))
