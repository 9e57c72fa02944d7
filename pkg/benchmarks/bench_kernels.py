#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Each hot kernel in ``pptts._kernels`` ships two implementations selected at
call time by the ``PPTTS_DISABLE_NUMBA`` environment variable. This script
times both paths on realistic problem sizes and prints a comparison table.

Run from the repository root:

    python3 benchmarks/bench_kernels.py
"""

from __future__ import annotations

import os
import statistics
import time

import numpy as np

from pptts import _kernels


def _time_path(fn, args, disable_numba: bool, repeats: int = 7) -> float:
    """Median wall time of one call, in milliseconds."""
    old = os.environ.get("PPTTS_DISABLE_NUMBA")
    os.environ["PPTTS_DISABLE_NUMBA"] = "1" if disable_numba else "0"
    try:
        fn(*args)  # warmup (includes JIT compilation on the numba path)
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn(*args)
            samples.append((time.perf_counter() - t0) * 1e3)
        return statistics.median(samples)
    finally:
        if old is None:
            os.environ.pop("PPTTS_DISABLE_NUMBA", None)
        else:
            os.environ["PPTTS_DISABLE_NUMBA"] = old


def main() -> None:
    rng = np.random.default_rng(0)
    cases = [
        (
            "mas_assignment 80x600",
            _kernels.mas_assignment,
            (rng.standard_normal((80, 600)),),
        ),
        (
            "mas_assignment 200x2000",
            _kernels.mas_assignment,
            (rng.standard_normal((200, 2000)),),
        ),
        (
            "levenshtein 2x1500",
            _kernels.levenshtein,
            (
                rng.integers(0, 64, 1500).astype(np.int64),
                rng.integers(0, 64, 1500).astype(np.int64),
            ),
        ),
        (
            "nearest_centroids 50000x16 k=128",
            _kernels.nearest_centroids,
            (
                rng.standard_normal((50_000, 16)),
                rng.standard_normal((128, 16)),
            ),
        ),
    ]

    if not _kernels._NUMBA_AVAILABLE:
        print("numba is not importable; only the numpy path can run")

    header = f"{'kernel':<34} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, fn, args in cases:
        t_numpy = _time_path(fn, args, disable_numba=True)
        if _kernels._NUMBA_AVAILABLE:
            t_numba = _time_path(fn, args, disable_numba=False)
            print(f"{name:<34} {t_numpy:>12.3f} {t_numba:>12.3f} {t_numpy / t_numba:>8.1f}x")
        else:
            print(f"{name:<34} {t_numpy:>12.3f} {'n/a':>12} {'n/a':>9}")


if __name__ == "__main__":
    main()
