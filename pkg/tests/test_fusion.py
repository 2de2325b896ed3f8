import numpy as np
import pytest

from occdistill.errors import ConsistencyError, DimensionError, TrainingError
from occdistill.fusion import (
    EmbeddingSet,
    LinearSVMModel,
    concat_embeddings,
    extract_embeddings,
    load_embeddings_csv,
    save_embeddings_csv,
    svm_predict,
    train_linear_svm,
)
from occdistill.model import init_params

from conftest import tiny_spec, toy_dataset


def _clusters(seed=0, n=20):
    r = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [5.0, 10.0 * np.sqrt(3) / 2]])  # pairwise distance 10
    y = np.repeat(np.arange(3), n)
    x = centers[y] + 0.01 * r.standard_normal((len(y), 2))
    return EmbeddingSet(x, y), centers


def test_concat_layout_and_identity(rng):
    a = EmbeddingSet(rng.standard_normal((5, 3)), np.arange(5))
    b = EmbeddingSet(rng.standard_normal((5, 4)), np.arange(5))
    ab = concat_embeddings(a, b)
    assert ab.width == 7
    for _ in range(20):
        i, j = int(rng.integers(5)), int(rng.integers(4))
        assert ab.matrix[i, 3 + j] == b.matrix[i, j]
    empty = EmbeddingSet(np.zeros((5, 0)), np.arange(5))
    assert np.array_equal(concat_embeddings(a, empty).matrix, a.matrix)
    wide = EmbeddingSet(np.zeros((2, 128)), [0, 1])
    assert concat_embeddings(wide, wide).width == 256


def test_concat_is_associative(rng):
    sets = [EmbeddingSet(rng.standard_normal((4, d)), np.arange(4)) for d in (2, 3, 1)]
    left = concat_embeddings(concat_embeddings(sets[0], sets[1]), sets[2])
    right = concat_embeddings(sets[0], concat_embeddings(sets[1], sets[2]))
    assert np.array_equal(left.matrix, right.matrix)


def test_concat_label_mismatch():
    with pytest.raises(ConsistencyError):
        concat_embeddings(EmbeddingSet(np.zeros((2, 1)), [0, 1]), EmbeddingSet(np.zeros((2, 1)), [1, 0]))


def test_csv_round_trip(tmp_path, rng):
    e = EmbeddingSet(rng.standard_normal((6, 3)).astype(np.float32), rng.integers(0, 3, 6))
    back = load_embeddings_csv(save_embeddings_csv(tmp_path / "e.csv", e))
    np.testing.assert_array_equal(back.labels, e.labels)
    np.testing.assert_array_equal(back.matrix.astype(np.float32), e.matrix)


def test_extract_embeddings_shape():
    spec = tiny_spec(emb=5)
    ds = toy_dataset(2)
    e = extract_embeddings(init_params(spec, 0), spec, ds)
    assert e.matrix.shape == (len(ds), 5) and np.array_equal(e.labels, ds.labels)


def test_svm_one_dimensional_separable():
    train = EmbeddingSet(np.array([[-1.0], [1.0]]), np.array([0, 1]))
    model = train_linear_svm(train)
    assert np.array_equal(svm_predict(model, train), [0, 1])


def test_svm_three_clusters_agree_with_nearest_centroid():
    train, centers = _clusters()
    pred = svm_predict(train_linear_svm(train), train)
    nearest = np.argmin(((train.matrix[:, None] - centers[None]) ** 2).sum(-1), axis=1)
    assert np.array_equal(pred, nearest) and np.array_equal(pred, train.labels)


def test_svm_duplication_and_zero_column_invariance():
    train, _ = _clusters(1, 8)
    probe = np.random.default_rng(2).uniform(-2, 12, (200, 2))
    base = svm_predict(train_linear_svm(train), probe)
    dup = EmbeddingSet(np.concatenate([train.matrix] * 2), np.concatenate([train.labels] * 2))
    assert np.array_equal(svm_predict(train_linear_svm(dup), train), train.labels)
    padded = EmbeddingSet(np.hstack([train.matrix, np.zeros((len(train), 1))]), train.labels)
    pad_model = train_linear_svm(padded)
    assert np.array_equal(svm_predict(pad_model, np.hstack([probe, np.zeros((200, 1))])), base)


def test_svm_is_deterministic():
    train, _ = _clusters(3, 5)
    a, b = train_linear_svm(train, iterations=300), train_linear_svm(train, iterations=300)
    assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)


def test_predict_sign_ties_and_constant_shift(rng):
    m = LinearSVMModel(np.array([[0.0], [1.0]]), np.zeros(2))
    assert svm_predict(m, np.array([[2.0]]))[0] == 1
    zero = LinearSVMModel(np.zeros((3, 4)), np.zeros(3))
    assert np.all(svm_predict(zero, rng.standard_normal((10, 4))) == 0)
    w, bias = rng.standard_normal((3, 4)), rng.standard_normal(3)
    x = rng.standard_normal((50, 4))
    shifted = LinearSVMModel(w, bias + 7.5)
    assert np.array_equal(svm_predict(LinearSVMModel(w, bias), x), svm_predict(shifted, x))


def test_svm_errors():
    with pytest.raises(TrainingError):
        train_linear_svm(EmbeddingSet(np.zeros((3, 2)), np.zeros(3, int)))
    m = LinearSVMModel(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(DimensionError):
        svm_predict(m, np.zeros((1, 4)))


def test_svm_dict_round_trip():
    train, _ = _clusters(4, 4)
    m = train_linear_svm(train, iterations=100)
    back = LinearSVMModel.from_dict(m.to_dict())
    assert np.array_equal(svm_predict(back, train), svm_predict(m, train))
