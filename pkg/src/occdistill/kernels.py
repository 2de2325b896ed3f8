"""Hot inner loops, each with a numba kernel and a numpy reference path.

The public functions dispatch on :data:`occdistill._accel.NUMBA_ENABLED`.
Both paths are kept importable (``*_numba`` / ``*_numpy``) so the benchmark
and the equivalence tests can call them side by side.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import NUMBA_ENABLED, njit


def out_size(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


# --------------------------------------------------------------------------
# im2col / col2im
# --------------------------------------------------------------------------


def im2col_numpy(xp, kh, kw, stride):
    B, C, Hp, Wp = xp.shape
    Ho, Wo = out_size(Hp, kh, stride), out_size(Wp, kw, stride)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
    # (B, C, Ho, Wo, kh, kw) -> rows ordered (b, oy, ox), columns (c, i, j)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)


def col2im_numpy(cols, shape, kh, kw, stride):
    B, C, Hp, Wp = shape
    Ho, Wo = out_size(Hp, kh, stride), out_size(Wp, kw, stride)
    d = cols.reshape(B, Ho, Wo, C, kh, kw)
    dx = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += d[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    return dx


@njit(cache=True)
def _im2col_kernel(xp, kh, kw, stride, Ho, Wo):
    B, C = xp.shape[0], xp.shape[1]
    cols = np.empty((B * Ho * Wo, C * kh * kw), dtype=xp.dtype)
    for b in range(B):
        for oy in range(Ho):
            for ox in range(Wo):
                r = (b * Ho + oy) * Wo + ox
                col = 0
                for c in range(C):
                    for i in range(kh):
                        y = oy * stride + i
                        for j in range(kw):
                            cols[r, col] = xp[b, c, y, ox * stride + j]
                            col += 1
    return cols


@njit(cache=True)
def _col2im_kernel(cols, dx, kh, kw, stride, Ho, Wo):
    B, C = dx.shape[0], dx.shape[1]
    for b in range(B):
        for oy in range(Ho):
            for ox in range(Wo):
                r = (b * Ho + oy) * Wo + ox
                col = 0
                for c in range(C):
                    for i in range(kh):
                        y = oy * stride + i
                        for j in range(kw):
                            dx[b, c, y, ox * stride + j] += cols[r, col]
                            col += 1
    return dx


def im2col_numba(xp, kh, kw, stride):
    Hp, Wp = xp.shape[2], xp.shape[3]
    return _im2col_kernel(np.ascontiguousarray(xp), kh, kw, stride, out_size(Hp, kh, stride), out_size(Wp, kw, stride))


def col2im_numba(cols, shape, kh, kw, stride):
    dx = np.zeros(shape, dtype=cols.dtype)
    Hp, Wp = shape[2], shape[3]
    return _col2im_kernel(
        np.ascontiguousarray(cols), dx, kh, kw, stride, out_size(Hp, kh, stride), out_size(Wp, kw, stride)
    )


# --------------------------------------------------------------------------
# max pooling
# --------------------------------------------------------------------------


def maxpool_forward_numpy(x, window, stride):
    """Returns pooled values and flat argmax positions within each H*W plane."""
    B, C, H, W = x.shape
    Ho, Wo = out_size(H, window, stride), out_size(W, window, stride)
    win = sliding_window_view(x, (window, window), axis=(2, 3))
    win = win[:, :, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
    flat = win.reshape(B, C, Ho, Wo, window * window)
    local = flat.argmax(axis=-1)  # first maximum in row-major window order
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    oy = np.arange(Ho)[:, None] * stride
    ox = np.arange(Wo)[None, :] * stride
    arg = (oy + local // window) * W + (ox + local % window)
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward_numpy(grad, arg, shape, window, stride):
    B, C, H, W = shape
    dx = np.zeros((B, C, H * W), dtype=grad.dtype)
    g = grad.reshape(B, C, -1)
    a = arg.reshape(B, C, -1)
    if stride >= window:
        # windows are disjoint so every argmax position is unique
        np.put_along_axis(dx, a, g, axis=2)
    else:
        bi = np.arange(B)[:, None, None]
        ci = np.arange(C)[None, :, None]
        np.add.at(dx, (bi, ci, a), g)
    return dx.reshape(shape)


@njit(cache=True)
def _maxpool_fwd_kernel(x, window, stride, Ho, Wo):
    B, C, H, W = x.shape
    out = np.empty((B, C, Ho, Wo), dtype=x.dtype)
    arg = np.empty((B, C, Ho, Wo), dtype=np.int64)
    for b in range(B):
        for c in range(C):
            for oy in range(Ho):
                for ox in range(Wo):
                    y0 = oy * stride
                    x0 = ox * stride
                    best = x[b, c, y0, x0]
                    bi = y0 * W + x0
                    for i in range(window):
                        for j in range(window):
                            v = x[b, c, y0 + i, x0 + j]
                            if v > best:
                                best = v
                                bi = (y0 + i) * W + x0 + j
                    out[b, c, oy, ox] = best
                    arg[b, c, oy, ox] = bi
    return out, arg


@njit(cache=True)
def _maxpool_bwd_kernel(grad, arg, dx):
    B, C, Ho, Wo = grad.shape
    for b in range(B):
        for c in range(C):
            for oy in range(Ho):
                for ox in range(Wo):
                    dx[b, c, arg[b, c, oy, ox]] += grad[b, c, oy, ox]
    return dx


def maxpool_forward_numba(x, window, stride):
    H, W = x.shape[2], x.shape[3]
    return _maxpool_fwd_kernel(
        np.ascontiguousarray(x), window, stride, out_size(H, window, stride), out_size(W, window, stride)
    )


def maxpool_backward_numba(grad, arg, shape, window, stride):
    B, C, H, W = shape
    dx = np.zeros((B, C, H * W), dtype=grad.dtype)
    return _maxpool_bwd_kernel(np.ascontiguousarray(grad), arg, dx).reshape(shape)


# --------------------------------------------------------------------------
# candidate search for triplet mining
# --------------------------------------------------------------------------


def extreme_candidates_numpy(anchors, cands, flat_idx, offsets, farthest):
    """For anchor i, scan ``cands[flat_idx[offsets[i]:offsets[i+1]]]``.

    Returns the chosen candidate index and its squared distance. Ties go to
    the lowest candidate index. Empty ranges yield index -1.
    """
    n = anchors.shape[0]
    out_idx = np.full(n, -1, dtype=np.int64)
    out_d = np.zeros(n, dtype=np.float64)
    a64 = anchors.astype(np.float64, copy=False)
    c64 = cands.astype(np.float64, copy=False)
    for i in range(n):
        idx = flat_idx[offsets[i] : offsets[i + 1]]
        if idx.size == 0:
            continue
        diff = c64[idx] - a64[i]
        d = np.einsum("ij,ij->i", diff, diff)
        target = d.max() if farthest else d.min()
        out_idx[i] = idx[d == target].min()
        out_d[i] = target
    return out_idx, out_d


@njit(cache=True)
def _extreme_kernel(anchors, cands, flat_idx, offsets, farthest):
    n, D = anchors.shape
    out_idx = np.full(n, -1, dtype=np.int64)
    out_d = np.zeros(n, dtype=np.float64)
    for i in range(n):
        best = -1
        bestd = 0.0
        for p in range(offsets[i], offsets[i + 1]):
            j = flat_idx[p]
            s = 0.0
            for k in range(D):
                t = anchors[i, k] - cands[j, k]
                s += t * t
            if best == -1:
                take = True
            elif farthest:
                take = s > bestd or (s == bestd and j < best)
            else:
                take = s < bestd or (s == bestd and j < best)
            if take:
                best = j
                bestd = s
        out_idx[i] = best
        out_d[i] = bestd
    return out_idx, out_d


def extreme_candidates_numba(anchors, cands, flat_idx, offsets, farthest):
    return _extreme_kernel(
        np.ascontiguousarray(anchors, dtype=np.float64),
        np.ascontiguousarray(cands, dtype=np.float64),
        np.ascontiguousarray(flat_idx, dtype=np.int64),
        np.ascontiguousarray(offsets, dtype=np.int64),
        bool(farthest),
    )


# --------------------------------------------------------------------------
# linear SVM, dual coordinate descent
# --------------------------------------------------------------------------


def svm_dual_cd_numpy(x, signs, C, bias_scale, order, max_epochs, tol):
    """Binary hinge SVM by dual coordinate descent over a fixed visiting order.

    The bias is the weight of an extra constant feature ``bias_scale``.
    Stops when the spread of projected gradients over one pass is <= ``tol``.
    Returns (w, b, epochs run).
    """
    n, D = x.shape
    x = x.astype(np.float64, copy=False)
    w = np.zeros(D, dtype=np.float64)
    wb = 0.0
    alpha = np.zeros(n, dtype=np.float64)
    qd = np.einsum("ij,ij->i", x, x) + bias_scale * bias_scale
    epochs = 0
    for _ in range(max_epochs):
        epochs += 1
        pg_max, pg_min = -np.inf, np.inf
        for i in order:
            if qd[i] <= 0.0:
                continue
            g = signs[i] * (float(np.dot(w, x[i])) + wb * bias_scale) - 1.0
            a = alpha[i]
            pg = min(g, 0.0) if a == 0.0 else max(g, 0.0) if a == C else g
            pg_max, pg_min = max(pg_max, pg), min(pg_min, pg)
            if pg != 0.0:
                alpha[i] = min(max(a - g / qd[i], 0.0), C)
                step = (alpha[i] - a) * signs[i]
                w += step * x[i]
                wb += step * bias_scale
        if pg_max - pg_min <= tol:
            break
    return w, wb * bias_scale, epochs


@njit(cache=True)
def _svm_dual_cd_kernel(x, signs, C, bias_scale, order, max_epochs, tol):
    n, D = x.shape
    w = np.zeros(D)
    wb = 0.0
    alpha = np.zeros(n)
    qd = np.empty(n)
    for i in range(n):
        s = bias_scale * bias_scale
        for k in range(D):
            s += x[i, k] * x[i, k]
        qd[i] = s
    epochs = 0
    for _ in range(max_epochs):
        epochs += 1
        pg_max, pg_min = -np.inf, np.inf
        for t in range(n):
            i = order[t]
            if qd[i] <= 0.0:
                continue
            dot = 0.0
            for k in range(D):
                dot += w[k] * x[i, k]
            g = signs[i] * (dot + wb * bias_scale) - 1.0
            a = alpha[i]
            if a == 0.0:
                pg = min(g, 0.0)
            elif a == C:
                pg = max(g, 0.0)
            else:
                pg = g
            pg_max = max(pg_max, pg)
            pg_min = min(pg_min, pg)
            if pg != 0.0:
                alpha[i] = min(max(a - g / qd[i], 0.0), C)
                step = (alpha[i] - a) * signs[i]
                for k in range(D):
                    w[k] += step * x[i, k]
                wb += step * bias_scale
        if pg_max - pg_min <= tol:
            break
    return w, wb * bias_scale, epochs


def svm_dual_cd_numba(x, signs, C, bias_scale, order, max_epochs, tol):
    return _svm_dual_cd_kernel(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(signs, dtype=np.float64),
        float(C),
        float(bias_scale),
        np.ascontiguousarray(order, dtype=np.int64),
        int(max_epochs),
        float(tol),
    )


# the strided-view copy in numpy beats the numba loop for im2col, so it is used either way
if NUMBA_ENABLED:
    im2col, col2im = im2col_numpy, col2im_numba
    maxpool_forward, maxpool_backward = maxpool_forward_numba, maxpool_backward_numba
    extreme_candidates = extreme_candidates_numba
    svm_dual_cd = svm_dual_cd_numba
else:
    im2col, col2im = im2col_numpy, col2im_numpy
    maxpool_forward, maxpool_backward = maxpool_forward_numpy, maxpool_backward_numpy
    extreme_candidates = extreme_candidates_numpy
    svm_dual_cd = svm_dual_cd_numpy
