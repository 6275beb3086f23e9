"""Timing harness for the alignment kernels: numba vs pure numpy.

The DP forward/backward pair is the hot loop of both training and
evaluation, so this is the comparison that justifies carrying two backends.
"""

from __future__ import annotations

import time

import numpy as np

from . import alignment


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_bench(batch: int = 64, rows: int = 8, cols: int = 8, smoothing: float = 0.1,
              repeats: int = 20) -> dict[str, float]:
    """Return best-of-N seconds per (forward+backward) call per backend."""
    rng = np.random.default_rng(0)
    costs = rng.uniform(0.0, 2.0, size=(batch, rows, cols))
    grad = rng.standard_normal(batch)

    def numpy_pass():
        totals, cum = alignment.otam_forward_numpy(costs, smoothing)
        alignment.otam_backward_numpy(costs, cum, smoothing, grad)
        return totals

    results = {"numpy": _time(numpy_pass, repeats)}

    try:
        from . import _alignment_numba as nb
    except ImportError:
        return results

    def numba_pass():
        totals, cum = nb.otam_forward(costs, smoothing)
        nb.otam_backward(costs, cum, smoothing, grad)
        return totals

    numba_pass()  # JIT warmup outside the timed region
    results["numba"] = _time(numba_pass, repeats)

    t_np, _ = alignment.otam_forward_numpy(costs, smoothing)
    t_nb, _ = nb.otam_forward(costs, smoothing)
    results["max_abs_diff"] = float(np.abs(t_np - t_nb).max())
    return results


def print_bench(batch: int, rows: int, cols: int, smoothing: float, repeats: int):
    res = run_bench(batch, rows, cols, smoothing, repeats)
    print(f"alignment DP benchmark: batch={batch} rows={rows} cols={cols} "
          f"smoothing={smoothing} repeats={repeats}")
    print(f"  numpy  {res['numpy'] * 1e3:9.3f} ms / forward+backward")
    if "numba" in res:
        speedup = res["numpy"] / res["numba"]
        print(f"  numba  {res['numba'] * 1e3:9.3f} ms / forward+backward  "
              f"({speedup:.1f}x vs numpy)")
        print(f"  backend agreement: max |diff| = {res['max_abs_diff']:.2e}")
    else:
        print("  numba unavailable; only the numpy backend was timed")
    print(f"  active backend: {alignment.backend_name()}")
