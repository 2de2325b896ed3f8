"""Grad-CAM saliency maps and the upper/lower saliency-mass statistic."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import ContractError
from .model import Conv, NetworkSpec, ParameterSet, ReLU, forward_trace
from .tensor import Tape, Tensor, backward


@dataclass
class SaliencyMap:
    map: np.ndarray  # [H, W] in [0, 1]
    target_class: int
    layer_index: int


def bilinear_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear interpolation with edge clamping."""
    h, w = img.shape

    def axis(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(height, h)
    x0, x1, fx = axis(width, w)
    rows = img[y0] * (1 - fy)[:, None] + img[y1] * fy[:, None]
    return rows[:, x0] * (1 - fx)[None, :] + rows[:, x1] * fx[None, :]


def min_max_normalize(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi <= 0:
        return np.zeros_like(m)
    if hi == lo:
        return np.ones_like(m)
    return (m - lo) / (hi - lo)


def cam_from_activations(activations: np.ndarray, gradients: np.ndarray, out_hw: Optional[tuple] = None) -> np.ndarray:
    """Grad-CAM map from [K, h, w] activations and d(score)/d(activation).

    Channel weights are the spatial mean of the gradients; the weighted sum
    is rectified, resized to ``out_hw`` and min-max normalised.
    """
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    weights = g.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, a, axes=1), 0.0)
    if out_hw is not None and tuple(out_hw) != cam.shape:
        cam = bilinear_resize(cam, *out_hw)
    return min_max_normalize(cam)


def grad_cam(
    params: ParameterSet,
    spec: NetworkSpec,
    image: np.ndarray,
    target_class: Optional[int] = None,
    conv_layer_index: Optional[int] = None,
) -> SaliencyMap:
    """Saliency of ``target_class`` (default: the predicted class) for one [C, H, W] image.

    ``conv_layer_index`` indexes ``spec.layers`` and must name a conv layer;
    the default is the last one. When the conv is followed by a ReLU the
    rectified feature maps are used.
    """
    convs = spec.conv_indices()
    if conv_layer_index is None:
        if not convs:
            raise ContractError("network has no convolutional layer")
        conv_layer_index = convs[-1]
    if conv_layer_index not in convs:
        raise ContractError(f"layer {conv_layer_index} is not a convolutional layer")
    act_index = conv_layer_index
    if act_index + 1 < len(spec.layers) and isinstance(spec.layers[act_index + 1], ReLU):
        act_index += 1

    x = np.asarray(image, dtype=params.tensors()[0].dtype)
    if x.ndim == 2:
        x = x[None]
    with Tape() as tape:
        outs = forward_trace(params, spec, Tensor(x[None]))
        logits = outs[-1]
        if target_class is None:
            target_class = int(np.argmax(logits.data[0]))
        if not 0 <= target_class < spec.num_classes:
            raise ContractError(f"target class {target_class} outside [0, {spec.num_classes})")
        score = logits[0, target_class]
    grads = backward(tape, score, wrt=[outs[act_index]])
    act = outs[act_index]
    cam = cam_from_activations(act.data[0], grads[act][0], x.shape[1:])
    return SaliencyMap(cam, int(target_class), int(conv_layer_index))


class MassSplit(NamedTuple):
    upper: float
    lower: float

    @property
    def reason(self) -> Optional[str]:
        return "all-zero map" if self.upper == 0 and self.lower == 0 else None


def saliency_mass_split(saliency) -> MassSplit:
    """Share of saliency in rows [0, H//2) versus [H//2, H)."""
    m = saliency.map if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    half = m.shape[0] // 2
    upper, lower = float(m[:half].sum()), float(m[half:].sum())
    total = upper + lower
    if total <= 0:
        return MassSplit(0.0, 0.0)
    return MassSplit(upper / total, lower / total)


def to_pgm_bytes(m: np.ndarray) -> bytes:
    m = np.asarray(m, dtype=np.float64)
    pixels = np.floor(np.clip(m, 0, 1) * 255 + 0.5).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path, m: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(to_pgm_bytes(m))
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ContractError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
