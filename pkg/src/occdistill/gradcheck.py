"""Central finite differences for verifying the autodiff engine."""

import numpy as np

from .tensor import Tape, Tensor, backward


def numerical_gradient(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. each array (float64)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*arrays))
            flat[i] = orig - h
            fm = float(fn(*arrays))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradients(build, arrays, h=1e-5, floor=1e-8):
    """Max per-coordinate relative error between autodiff and finite differences.

    ``build`` maps input Tensors to a scalar loss Tensor. Inputs are float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(*leaves)
    auto = backward(tape, loss, wrt=leaves)

    def value(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    numeric = numerical_gradient(value, arrays, h=h)
    return max(float(relative_error(auto[t], n, floor).max(initial=0.0)) for t, n in zip(leaves, numeric))
