"""Benchmark the compiled kernels against the numpy reference backend.

Run as ``python -m invgfx.bench_kernels``. Reports per-call wall time for
the hot inner loops at the shapes the training tasks actually use, plus a
max-abs cross-backend deviation column (forwards are bit-identical by
design; gradients agree to rounding).
"""

from __future__ import annotations

import time

import numpy as np

from .kernels import reference


def _timeit(fn, repeats=30):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(rng):
    x32 = rng.normal(size=(8, 32, 32))
    k32 = rng.normal(size=(16, 8, 3, 3))
    g32 = reference.conv2d_forward(x32, k32, 2, 1)
    img = rng.normal(size=(1, 32, 32))
    xs = rng.uniform(0, 31, size=(32, 32))
    ys = rng.uniform(0, 31, size=(32, 32))
    gb = rng.normal(size=(1, 32, 32))
    pool_in = rng.normal(size=(4, 32, 32))
    gp = reference.avg_pool_forward(pool_in, 4, 4)
    return [
        ("conv2d_forward 8x32x32 k3s2", "conv2d_forward", (x32, k32, 2, 1)),
        ("conv2d_grad_input", "conv2d_grad_input", (g32, k32, 2, 1, x32.shape)),
        ("conv2d_grad_kernel", "conv2d_grad_kernel", (g32, x32, 2, 1, k32.shape)),
        ("avg_pool 4x4", "avg_pool_forward", (pool_in, 4, 4)),
        ("avg_pool grad", "avg_pool_grad", (gp, 4, 4, pool_in.shape)),
        ("bilinear_forward 32x32", "bilinear_forward", (img, xs, ys)),
        ("bilinear_grad 32x32", "bilinear_grad", (img, xs, ys, gb)),
    ]


def main() -> int:
    try:
        from .kernels import _fastcore as fast
    except ImportError:
        fast = None
    rng = np.random.default_rng(0)
    cases = _cases(rng)
    print("%-30s %12s %12s %8s %10s" % ("kernel", "reference", "compiled",
                                        "speedup", "max|diff|"))
    c3 = lambda a: np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    for label, name, args in cases:
        ref_fn = getattr(reference, name)
        t_ref = _timeit(lambda: ref_fn(*args))
        if fast is None:
            print("%-30s %10.3fms %12s" % (label, t_ref * 1e3, "missing"))
            continue
        fargs = tuple(c3(a) if isinstance(a, np.ndarray) else a for a in args)
        fast_fn = getattr(fast, name)
        t_fast = _timeit(lambda: fast_fn(*fargs))
        out_r = ref_fn(*args)
        out_f = fast_fn(*fargs)
        if isinstance(out_r, tuple):
            diff = max(float(np.max(np.abs(a - b))) for a, b in zip(out_r, out_f))
        else:
            diff = float(np.max(np.abs(out_r - out_f)))
        print("%-30s %10.3fms %10.3fms %7.1fx %10.2e"
              % (label, t_ref * 1e3, t_fast * 1e3, t_ref / t_fast, diff))
    if fast is None:
        print("\ncompiled backend not built; run: python3 setup.py build_ext --inplace")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
