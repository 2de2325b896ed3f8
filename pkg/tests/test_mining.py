import numpy as np
import pytest

from occdistill.data import OcclusionMode, apply_occlusion
from occdistill.distill import TripletConfig, candidate_sets, mine_from_embeddings, mine_triplets
from occdistill.distill.mining import check_aligned, mining_rng
from occdistill.errors import ConsistencyError, DatasetError, IncompatibilityError
from occdistill.model import init_params

from conftest import tiny_spec, toy_dataset


def brute_force(student, teacher, labels, pos_sets=None, neg_sets=None):
    """Exhaustive search with lowest-index tie-breaking, squared distances in float64."""
    n = len(labels)
    pos, neg = [], []
    for i in range(n):
        ps = range(n) if pos_sets is None else sorted(pos_sets[i])
        ns = range(n) if neg_sets is None else sorted(neg_sets[i])
        best_p, best_dp = None, -1.0
        for j in ps:
            if labels[j] != labels[i]:
                continue
            d = float(np.sum((student[i].astype(np.float64) - teacher[j]) ** 2))
            if d > best_dp:
                best_p, best_dp = j, d
        best_n, best_dn = None, np.inf
        for j in ns:
            if labels[j] == labels[i]:
                continue
            d = float(np.sum((student[i].astype(np.float64) - student[j]) ** 2))
            if d < best_dn:
                best_n, best_dn = j, d
        pos.append(best_p)
        neg.append(best_n)
    return np.array(pos), np.array(neg)


def test_spec_example_one_dimensional():
    s = np.array([[0.0], [0.2], [1.0], [1.2]])
    t = np.array([[0.1], [0.4], [0.9], [1.3]])
    y = np.array([0, 0, 1, 1])
    m = mine_from_embeddings(s, t, y, 1.0, np.random.default_rng(0))
    assert m.positive[0] == 1 and m.negative[0] == 2
    assert m.d_pos[0] == pytest.approx(0.4) and m.d_neg[0] == pytest.approx(1.0)


def test_identical_embeddings_choose_lowest_index():
    y = np.array([1, 0, 1, 0, 1])
    e = np.ones((5, 3))
    m = mine_from_embeddings(e, e, y, 1.0, np.random.default_rng(0))
    for i in range(5):
        same = np.flatnonzero(y == y[i])
        other = np.flatnonzero(y != y[i])
        assert m.positive[i] == same[0] and m.negative[i] == other[0]


def test_full_subset_matches_brute_force_on_random_instances():
    r = np.random.default_rng(21)
    for trial in range(100):
        n = int(r.integers(4, 65))
        k = int(r.integers(2, 5))
        y = r.integers(0, k, n)
        y[:2] = [0, 1]  # at least two classes
        d = int(r.integers(1, 6))
        if trial % 5 == 0:  # quantised embeddings to provoke ties
            s, t = r.integers(0, 3, (n, d)).astype(float), r.integers(0, 3, (n, d)).astype(float)
        else:
            s, t = r.standard_normal((n, d)), r.standard_normal((n, d))
        m = mine_from_embeddings(s, t, y, 1.0, np.random.default_rng(trial))
        bp, bn = brute_force(s, t, y)
        assert np.array_equal(m.positive, bp) and np.array_equal(m.negative, bn)
        assert np.all(y[m.positive] == y) and np.all(y[m.negative] != y)
        assert np.array_equal(m.anchor, np.arange(n))


def test_sampled_subsets_match_brute_force_over_the_same_subsets():
    r = np.random.default_rng(22)
    for trial in range(20):
        n = int(r.integers(20, 80))
        y = r.integers(0, 3, n)
        s, t = r.standard_normal((n, 4)), r.standard_normal((n, 4))
        (pf, po), (nf, no), _ = candidate_sets(y, 0.2, np.random.default_rng([trial, 1]))
        pos_sets = [pf[po[i] : po[i + 1]] for i in range(n)]
        neg_sets = [nf[no[i] : no[i + 1]] for i in range(n)]
        m = mine_from_embeddings(s, t, y, 0.2, np.random.default_rng([trial, 1]))
        bp, bn = brute_force(s, t, y, pos_sets, neg_sets)
        assert np.array_equal(m.positive, bp) and np.array_equal(m.negative, bn)


def test_subset_size_and_fallback():
    y = np.array([0] * 99 + [1])
    (pf, po), (nf, no), fallbacks = candidate_sets(y, 0.1, np.random.default_rng(0))
    assert fallbacks > 0  # most subsets miss the single class-1 image
    for i in range(len(y)):
        assert len(pf[po[i] : po[i + 1]]) > 0 and len(nf[no[i] : no[i + 1]]) > 0
        assert len(pf[po[i] : po[i + 1]]) <= 10 or y[i] == 1 and len(pf[po[i] : po[i + 1]]) == 1


def test_single_class_is_a_dataset_error():
    with pytest.raises(DatasetError):
        candidate_sets(np.zeros(5, np.int64), 1.0, np.random.default_rng(0))


def test_mining_rng_depends_on_seed_and_epoch():
    a = mining_rng(1, 2).integers(0, 1 << 30, 4)
    assert np.array_equal(a, mining_rng(1, 2).integers(0, 1 << 30, 4))
    assert not np.array_equal(a, mining_rng(1, 3).integers(0, 1 << 30, 4))


def _views():
    vis = toy_dataset(5)
    return vis, apply_occlusion(vis, OcclusionMode.UPPER_HALF_OCCLUDED)


def test_mine_triplets_contract():
    spec = tiny_spec()
    vis, occ = _views()
    student, teacher = init_params(spec, 1), init_params(spec, 2, role="teacher")
    cfg = TripletConfig(subset_fraction=0.3)
    trips = mine_triplets(student, teacher, spec, occ, vis, cfg, seed=5, epoch=3)
    assert len(trips) == len(occ)
    for t in trips:
        assert occ.labels[t.anchor_index] == vis.labels[t.positive_index]
        assert occ.labels[t.anchor_index] != occ.labels[t.negative_index]
        assert t.epoch == 3
    again = mine_triplets(student, teacher, spec, occ, vis, cfg, seed=5, epoch=3)
    assert trips == again


def test_mine_triplets_rejects_misaligned_or_foreign_inputs():
    spec = tiny_spec()
    vis, occ = _views()
    student = init_params(spec, 1)
    with pytest.raises(ConsistencyError):
        check_aligned(occ, vis.subset(np.arange(len(vis) - 1)))
    with pytest.raises(ConsistencyError):
        check_aligned(occ, occ)
    other = tiny_spec(emb=6)
    with pytest.raises(IncompatibilityError):
        mine_triplets(student, init_params(other, 0), spec, occ, vis)
