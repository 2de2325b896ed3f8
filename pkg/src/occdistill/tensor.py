"""Minimal reverse-mode automatic differentiation.

Operations executed while a :class:`Tape` is active are recorded in execution
order; :func:`backward` replays that list in reverse. Outside a tape every op
is a plain forward computation, which is how inference runs.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = relu(x @ w).sum()
    grads = backward(tape, loss)
    grads[w]  # same array as w.grad
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, ParameterError

_ACTIVE: list["Tape"] = []


class Tensor:
    """An ndarray plus gradient bookkeeping.

    Tensors hash by identity so they can key gradient maps.
    """

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of differentiable operations for one training step."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _ACTIVE:
        _ACTIVE[-1].nodes.append(Node(out, tuple(inputs), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and reductions
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(
        out, (a, b), lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))
    )


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    out = np.maximum(a.data, 0)
    return _emit(out, (a,), lambda g: (np.where(out > 0, g, 0).astype(g.dtype, copy=False),))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in parts)

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit(a.data[index], (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


# --------------------------------------------------------------------------
# linear algebra and CNN ops
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def conv2d(x: Tensor, kernels_: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [B,C,H,W]) with [Co,Ci,kh,kw] kernels."""
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels_.ndim != 4:
        raise DimensionError(f"conv2d: expected [B,C,H,W] input and 4-d kernels, got {x.shape} and {kernels_.shape}")
    B, C, H, W = xd.shape
    Co, Ci, kh, kw = kernels_.shape
    if Ci != C:
        raise DimensionError(f"conv2d: input has {C} channels but kernels {kernels_.shape} expect {Ci}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kernels_.shape} larger than padded input {x.shape} (padding {padding})")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    Ho = kernels.out_size(H + 2 * padding, kh, stride)
    Wo = kernels.out_size(W + 2 * padding, kw, stride)
    cols = kernels.im2col(xp, kh, kw, stride)
    wmat = kernels_.data.reshape(Co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))
    if single:
        out = out[0]
    padded_shape = xp.shape

    def vjp(g):
        g4 = g[None] if single else g
        gm = g4.transpose(0, 2, 3, 1).reshape(-1, Co)
        dw = (gm.T @ cols).reshape(kernels_.shape)
        dx = None
        if x.requires_grad:
            dxp = kernels.col2im(gm @ wmat, padded_shape, kh, kw, stride)
            dx = dxp[:, :, padding : padding + H, padding : padding + W]
            dx = dx[0] if single else dx
        grads = (dx, dw)
        if bias is not None:
            grads += (gm.sum(axis=0),)
        return grads

    inputs = (x, kernels_) if bias is None else (x, kernels_, bias)
    return _emit(out, inputs, vjp)


def maxpool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Window maxima; gradient goes to the first maximum in row-major order."""
    stride = window if stride is None else stride
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise DimensionError(f"maxpool2d: expected [C,H,W] or [B,C,H,W], got {x.shape}")
    if window < 1 or stride < 1 or window > xd.shape[2] or window > xd.shape[3]:
        raise DimensionError(f"maxpool2d: window {window} does not fit input {x.shape}")
    out, arg = kernels.maxpool_forward(np.ascontiguousarray(xd), window, stride)
    shape = xd.shape

    def vjp(g):
        g4 = g[None] if single else g
        dx = kernels.maxpool_backward(np.ascontiguousarray(g4), arg, shape, window, stride)
        return (dx[0] if single else dx,)

    return _emit(out[0] if single else out, (x,), vjp)


def softmax_with_temperature(logits: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    """softmax(logits / tau) along ``axis``, stabilised by max subtraction."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    logits = _as_tensor(logits)
    if logits.ndim == 0 or logits.shape[axis] < 1:
        raise DimensionError(f"softmax over empty axis of shape {logits.shape}")
    z = logits.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return ((p * (g - (g * p).sum(axis=axis, keepdims=True))) / tau,)

    return _emit(p, (logits,), vjp)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    return softmax_with_temperature(logits, 1.0, axis=axis)


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] = ()) -> dict:
    """Propagate d(loss) through ``tape``.

    Returns a map from every gradient-requiring tensor on the tape (plus any
    in ``wrt``) to its gradient; tensors the loss does not depend on get
    zeros. The same arrays are stored on each tensor's ``.grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.out) for n in tape.nodes}
    if id(loss) not in produced and not loss.requires_grad:
        raise ContractError("loss was not produced by any operation recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        seen.setdefault(id(node.out), node.out)
        for t in node.inputs:
            if t.requires_grad:
                seen.setdefault(id(t), t)
        g = grads.get(id(node.out))
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
    for t in wrt:
        seen.setdefault(id(t), t)

    result = {}
    for key, t in seen.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        elif g.shape != t.shape:
            g = np.broadcast_to(g, t.shape)
        g = np.ascontiguousarray(g, dtype=t.dtype)
        t.grad = g
        result[t] = g
    return result
