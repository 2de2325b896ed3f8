import numpy as np
import pytest

from occdistill.errors import ContractError
from occdistill.explain import (
    bilinear_resize,
    cam_from_activations,
    grad_cam,
    read_pgm,
    saliency_mass_split,
    to_pgm_bytes,
    write_pgm,
)
from occdistill.model import init_params

from conftest import tiny_spec, toy_dataset


def test_two_channel_arithmetic_oracle():
    acts = np.array([[[1.0, 2.0], [3.0, 4.0]], [[4.0, 0.0], [0.0, 1.0]]])
    grads = np.array([[[0.2, 0.8], [0.4, 0.6]], [[-0.5, 0.0], [-0.25, -0.25]]])
    w1, w2 = 0.5, -0.25
    raw = [[max(w1 * acts[0, i, j] + w2 * acts[1, i, j], 0.0) for j in range(2)] for i in range(2)]
    raw = np.array(raw)
    expected = (raw - raw.min()) / (raw.max() - raw.min())
    np.testing.assert_allclose(cam_from_activations(acts, grads), expected, atol=1e-12)


def test_single_channel_preserves_argmax(rng):
    a = np.maximum(rng.standard_normal((1, 5, 5)), 0)
    cam = cam_from_activations(a, np.full_like(a, 0.3))
    assert np.unravel_index(cam.argmax(), cam.shape) == np.unravel_index(a[0].argmax(), a[0].shape)
    np.testing.assert_allclose(cam, (a[0] - a[0].min()) / (a[0].max() - a[0].min()))


def test_negative_gradients_give_zero_map(rng):
    a = rng.uniform(0.1, 1, (3, 4, 4))
    assert np.all(cam_from_activations(a, -np.ones_like(a), (8, 8)) == 0)


def test_bilinear_resize_constant_and_identity(rng):
    img = rng.random((3, 4))
    np.testing.assert_allclose(bilinear_resize(img, 3, 4), img)
    np.testing.assert_allclose(bilinear_resize(np.full((2, 2), 0.7), 5, 7), 0.7)


@pytest.fixture(scope="module")
def net():
    spec = tiny_spec()
    return spec, init_params(spec, 3), toy_dataset(3)


def test_grad_cam_range_and_shape(net):
    spec, params, ds = net
    for img in ds.images:
        s = grad_cam(params, spec, img)
        assert s.map.shape == (8, 8) and s.map.min() >= 0 and s.map.max() <= 1
        assert s.map.max() == 0 or s.map.max() == pytest.approx(1.0)
        assert s.layer_index == spec.conv_indices()[-1]


def test_grad_cam_invariant_to_logit_rescaling(net):
    spec, params, ds = net
    scaled = params.copy()
    last = scaled.tensors()[-2:]  # weight and bias of the output layer
    for t in last:
        t.data *= 3.5
    for img in ds.images[:5]:
        a = grad_cam(params, spec, img, target_class=1)
        b = grad_cam(scaled, spec, img, target_class=1)
        np.testing.assert_allclose(a.map, b.map, atol=1e-5)
        assert a.map.argmax() == b.map.argmax() or a.map.max() == 0


def test_grad_cam_contract_errors(net):
    spec, params, ds = net
    with pytest.raises(ContractError):
        grad_cam(params, spec, ds.images[0], conv_layer_index=1)  # ReLU, not conv
    with pytest.raises(ContractError):
        grad_cam(params, spec, ds.images[0], target_class=spec.num_classes)


def test_mass_split_examples():
    m = np.zeros((4, 3))
    m[2:] = 1
    assert tuple(saliency_mass_split(m)) == (0.0, 1.0)
    assert tuple(saliency_mass_split(np.ones((6, 2)))) == (0.5, 0.5)
    m = np.array([[1.0], [3.0]])
    assert tuple(saliency_mass_split(m)) == (0.25, 0.75)
    z = saliency_mass_split(np.zeros((4, 4)))
    assert tuple(z) == (0.0, 0.0) and z.reason
    assert saliency_mass_split(np.ones((5, 5))).reason is None


def test_mass_split_sums_to_zero_or_one(rng):
    for _ in range(50):
        m = np.maximum(rng.standard_normal((int(rng.integers(1, 9)), 4)), 0) * rng.integers(0, 2)
        s = saliency_mass_split(m)
        assert s.upper + s.lower in (0.0, pytest.approx(1.0))


def test_pgm_bytes_and_round_trip(tmp_path):
    m = np.array([[0.0, 0.5, 1.0]])
    assert to_pgm_bytes(m) == b"P5\n3 1\n255\n" + bytes([0, 128, 255])
    back = read_pgm(write_pgm(tmp_path / "m.pgm", m))
    assert back.tolist() == [[0, 128, 255]]
