"""CNN description, parameters, SGD with momentum and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from .errors import ContractError, DimensionError, FormatError, IncompatibilityError
from .tensor import Tensor, conv2d, matmul, maxpool2d, relu

MAGIC = b"ODCKPT01"


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    type: str = field(default="conv", init=False)


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int = 2
    type: str = field(default="maxpool", init=False)


@dataclass(frozen=True)
class Dense:
    out_features: int
    type: str = field(default="dense", init=False)


@dataclass(frozen=True)
class ReLU:
    type: str = field(default="relu", init=False)


_LAYER_TYPES = {"conv": Conv, "maxpool": MaxPool, "dense": Dense, "relu": ReLU}


def _layer_to_dict(layer) -> dict:
    d = {k: v for k, v in layer.__dict__.items() if k != "type"}
    return {"type": layer.type, **d}


def _layer_from_dict(d: Mapping):
    d = dict(d)
    kind = d.pop("type")
    if kind not in _LAYER_TYPES:
        raise ContractError(f"unknown layer type {kind!r}")
    return _LAYER_TYPES[kind](**d)


@dataclass(frozen=True)
class NetworkSpec:
    """Layer stack ending in a dense layer that produces class logits."""

    input_shape: tuple
    num_classes: int
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.layer_shapes()  # validates the stack

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [_layer_to_dict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), int(d["num_classes"]), tuple(_layer_from_dict(x) for x in d["layers"]))

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def layer_shapes(self) -> list:
        """Output shape (without batch axis) of every layer."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise DimensionError(f"input shape must be (C, H, W), got {self.input_shape}")
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise DimensionError("the last layer must be a dense layer")
        if self.layers[-1].out_features != self.num_classes:
            raise DimensionError(
                f"final dense layer has {self.layers[-1].out_features} outputs for {self.num_classes} classes"
            )
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise DimensionError(f"layer {i}: conv after flattening")
                c, h, w = shape
                hp, wp = h + 2 * layer.padding, w + 2 * layer.padding
                if layer.kernel > hp or layer.kernel > wp:
                    raise DimensionError(f"layer {i}: kernel {layer.kernel} exceeds padded input {hp}x{wp}")
                shape = (
                    layer.out_channels,
                    (hp - layer.kernel) // layer.stride + 1,
                    (wp - layer.kernel) // layer.stride + 1,
                )
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise DimensionError(f"layer {i}: pooling after flattening")
                c, h, w = shape
                if layer.window > h or layer.window > w:
                    raise DimensionError(f"layer {i}: pool window {layer.window} exceeds {h}x{w}")
                shape = (c, (h - layer.window) // layer.stride + 1, (w - layer.window) // layer.stride + 1)
            elif isinstance(layer, Dense):
                shape = (layer.out_features,)
            elif not isinstance(layer, ReLU):
                raise ContractError(f"layer {i}: unsupported layer {layer!r}")
            shapes.append(shape)
        return shapes

    @property
    def embedding_dim(self) -> int:
        shapes = [self.input_shape] + self.layer_shapes()
        return int(np.prod(shapes[-2]))

    def conv_indices(self) -> list:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Conv)]


def desk_spec(input_shape=(1, 28, 28), num_classes: int = 10, embedding_dim: int = 128) -> NetworkSpec:
    """conv32-relu-pool-conv64-relu-pool-dense128-relu-dense(K)."""
    return NetworkSpec(
        input_shape,
        num_classes,
        (
            Conv(32, 3, 1, 1),
            ReLU(),
            MaxPool(2, 2),
            Conv(64, 3, 1, 1),
            ReLU(),
            MaxPool(2, 2),
            Dense(embedding_dim),
            ReLU(),
            Dense(num_classes),
        ),
    )


@dataclass
class ParameterSet:
    params: dict
    role: str
    fingerprint: str

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def names(self) -> list:
        return list(self.params)

    def tensors(self) -> list:
        return list(self.params.values())

    def copy(self, role: Optional[str] = None) -> "ParameterSet":
        return ParameterSet(
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()},
            role or self.role,
            self.fingerprint,
        )

    def as_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def bit_equal(self, other: "ParameterSet") -> bool:
        return self.names() == other.names() and all(
            a.data.dtype == b.data.dtype and np.array_equal(a.data, b.data)
            for a, b in zip(self.tensors(), other.tensors())
        )


def parameter_shapes(spec: NetworkSpec) -> dict:
    shapes = {}
    prev = spec.input_shape
    for i, (layer, out) in enumerate(zip(spec.layers, spec.layer_shapes())):
        if isinstance(layer, Conv):
            shapes[f"{i}.weight"] = (layer.out_channels, prev[0], layer.kernel, layer.kernel)
            shapes[f"{i}.bias"] = (layer.out_channels,)
        elif isinstance(layer, Dense):
            shapes[f"{i}.weight"] = (int(np.prod(prev)), layer.out_features)
            shapes[f"{i}.bias"] = (layer.out_features,)
        prev = out
    return shapes


def init_params(spec: NetworkSpec, seed: int, role: str = "student", dtype=np.float32) -> ParameterSet:
    """He initialisation (normal, std sqrt(2/fan_in)) with zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(spec).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            arr = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return ParameterSet(params, role, spec.fingerprint)


def _check_compatible(params: ParameterSet, spec: NetworkSpec):
    if params.fingerprint != spec.fingerprint:
        raise IncompatibilityError(
            f"parameters built for architecture {params.fingerprint[:12]} used with {spec.fingerprint[:12]}"
        )


def forward_trace(params: ParameterSet, spec: NetworkSpec, batch) -> list:
    """Every layer's output, in order (the input is not included)."""
    _check_compatible(params, spec)
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=params.tensors()[0].dtype))
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match network input (B, {spec.input_shape})")
    outs = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            x = conv2d(x, params[f"{i}.weight"], params[f"{i}.bias"], layer.stride, layer.padding)
        elif isinstance(layer, MaxPool):
            x = maxpool2d(x, layer.window, layer.stride)
        elif isinstance(layer, ReLU):
            x = relu(x)
        else:
            if x.ndim != 2:
                x = x.reshape(x.shape[0], -1)
            x = matmul(x, params[f"{i}.weight"]) + params[f"{i}.bias"]
        outs.append(x)
    return outs


def forward(params: ParameterSet, spec: NetworkSpec, batch):
    """Returns ``(logits, embedding)``; the embedding feeds the final dense layer."""
    outs = forward_trace(params, spec, batch)
    if len(outs) == 1:
        emb = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=params.tensors()[0].dtype))
    else:
        emb = outs[-2]
    if emb.ndim != 2:
        emb = emb.reshape(emb.shape[0], -1)
    return outs[-1], emb


def infer(params: ParameterSet, spec: NetworkSpec, images: np.ndarray, batch_size: int = 256):
    """Logits and embeddings of a whole image array, without recording gradients."""
    logits, embs = [], []
    for start in range(0, len(images), batch_size):
        lg, em = forward(params, spec, images[start : start + batch_size])
        logits.append(lg.data)
        embs.append(em.data)
    if not logits:
        return np.zeros((0, spec.num_classes), np.float32), np.zeros((0, spec.embedding_dim), np.float32)
    return np.concatenate(logits), np.concatenate(embs)


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)
    patience_counter: int = 0
    best_error: float = math.inf

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.lr > 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")


def sgd_momentum_step(params: ParameterSet, grads: Mapping, state: OptimizerState) -> OptimizerState:
    """v <- mu*v + g ; w <- w - lr*v, in place. ``grads`` is keyed by name or by Tensor."""
    for name, t in params.params.items():
        g = grads.get(t) if t in grads else grads.get(name)
        if g is None:
            raise ContractError(f"missing gradient for parameter {name!r}")
        g = np.asarray(g, dtype=t.dtype)
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(t.data)
        v *= state.momentum
        v += g
        t.data -= state.lr * v
    return state


def decay_on_plateau(
    state: OptimizerState, validation_error: float, patience: int = 10, factor: float = 0.1
) -> OptimizerState:
    """Multiply lr by ``factor`` after ``patience`` epochs without a new best error."""
    if validation_error < state.best_error:
        state.best_error = float(validation_error)
        state.patience_counter = 0
    else:
        state.patience_counter += 1
        if state.patience_counter >= patience:
            state.lr *= factor
            state.patience_counter = 0
    return state


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: ParameterSet
    spec: NetworkSpec
    optimizer: dict


def save_checkpoint(
    path: Union[str, Path], params: ParameterSet, spec: NetworkSpec, state: Optional[OptimizerState] = None
) -> Path:
    _check_compatible(params, spec)
    names = params.names()
    opt = {}
    if state is not None:
        opt = {
            "lr": state.lr,
            "momentum": state.momentum,
            "patience_counter": state.patience_counter,
            "best_error": None if math.isinf(state.best_error) else state.best_error,
        }
    manifest = {
        "spec": spec.to_dict(),
        "fingerprint": spec.fingerprint,
        "role": params.role,
        "names": names,
        "shapes": [list(params[n].shape) for n in names],
        "optimizer": opt,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f4").tobytes())
    return path


def load_checkpoint(path: Union[str, Path], expected_fingerprint: Optional[str] = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    if 16 + n > len(raw):
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16 : 16 + n].decode("utf-8"))
        spec = NetworkSpec.from_dict(manifest["spec"])
        names, shapes = manifest["names"], [tuple(s) for s in manifest["shapes"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from exc
    if spec.fingerprint != manifest.get("fingerprint"):
        raise FormatError(f"{path}: manifest fingerprint does not match its spec")
    if expected_fingerprint is not None and spec.fingerprint != expected_fingerprint:
        raise IncompatibilityError(
            f"{path}: architecture {spec.fingerprint[:12]} differs from expected {expected_fingerprint[:12]}"
        )
    expected_shapes = parameter_shapes(spec)
    if list(expected_shapes) != names or [expected_shapes[k] for k in names] != shapes:
        raise FormatError(f"{path}: parameter table does not match the spec")
    total = sum(int(np.prod(s)) for s in shapes) * 4
    payload = raw[16 + n :]
    if len(payload) != total:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {total}")
    params, offset = {}, 0
    for name, shape in zip(names, shapes):
        size = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=offset).reshape(shape)
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
        offset += size * 4
    opt = manifest.get("optimizer") or {}
    return Checkpoint(ParameterSet(params, manifest.get("role", "student"), spec.fingerprint), spec, opt)
