"""Time the numba and numpy variants of each hot kernel on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Both variants are imported directly, so the OD_DISABLE_NUMBA flag is not
needed here. Outputs are also checked for equality.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from occdistill import kernels
from occdistill._accel import NUMBA_ENABLED


def _time(fn, args, repeat):
    fn(*args)  # warm-up, includes JIT compilation
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    x = rng.standard_normal((64, 32, 30, 30)).astype(np.float32)
    cols = kernels.im2col_numpy(x, 3, 3, 1)
    pool_in = rng.standard_normal((64, 32, 28, 28)).astype(np.float32)
    pooled, arg = kernels.maxpool_forward_numpy(pool_in, 2, 2)
    g = rng.standard_normal(pooled.shape).astype(np.float32)
    anchors = rng.standard_normal((512, 128))
    cands = rng.standard_normal((9000, 128))
    flat = rng.integers(0, 9000, 512 * 900)
    offsets = np.arange(0, 512 * 900 + 1, 900)
    emb = rng.standard_normal((2000, 256))
    signs = np.where(rng.random(2000) < 0.1, 1.0, -1.0)
    order = rng.permutation(2000)
    return {
        "im2col": ("im2col", (x, 3, 3, 1)),
        "col2im": ("col2im", (cols, x.shape, 3, 3, 1)),
        "maxpool_forward": ("maxpool_forward", (pool_in, 2, 2)),
        "maxpool_backward": ("maxpool_backward", (g, arg, pool_in.shape, 2, 2)),
        "extreme_candidates": ("extreme_candidates", (anchors, cands, flat, offsets, True)),
        "svm_dual_cd": ("svm_dual_cd", (emb, signs, 1.0, 1.0, order, 20, 0.0)),
    }


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(u, v) for u, v in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)), initial=0.0))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    if not NUMBA_ENABLED:
        print("numba unavailable or disabled; only the numpy path can be timed")
    rows = []
    for name, (base, call_args) in cases(np.random.default_rng(0)).items():
        f_np = getattr(kernels, f"{base}_numpy")
        t_np = _time(f_np, call_args, args.repeat)
        row = {"kernel": name, "numpy_ms": 1e3 * t_np}
        if NUMBA_ENABLED:
            f_nb = getattr(kernels, f"{base}_numba")
            row["numba_ms"] = 1e3 * _time(f_nb, call_args, args.repeat)
            row["speedup"] = t_np / (row["numba_ms"] / 1e3)
            row["max_abs_diff"] = _max_diff(f_np(*call_args), f_nb(*call_args))
        rows.append(row)
        print("  ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
