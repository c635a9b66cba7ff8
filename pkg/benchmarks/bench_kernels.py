#!/usr/bin/env python3
"""Benchmark the compiled kernels against the NumPy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from moleseg.kernels import _numpy

try:
    from moleseg import _native
except ImportError:
    _native = None

CASES = [
    ("fwd  8x16x16 -> 64x64", "fwd", (8, 16, 16), (64, 64)),
    ("fwd  3x64x64 -> 256x256", "fwd", (3, 64, 64), (256, 256)),
    ("fwd  32x8x8 -> 32x32", "fwd", (32, 8, 8), (32, 32)),
    ("bwd  8x64x64 -> 16x16", "bwd", (8, 64, 64), (16, 16)),
    ("bwd  3x256x256 -> 64x64", "bwd", (3, 256, 256), (64, 64)),
    ("bwd  32x32x32 -> 8x8", "bwd", (32, 32, 32), (8, 8)),
]


def run(fn, *args, repeats):
    fn(*args)  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    print(f"{'case':<28} {'numpy':>10} {'native':>10} {'speedup':>8}")
    for label, kind, shape, target in CASES:
        x = rng.standard_normal(shape).astype(np.float32)
        if kind == "fwd":
            np_args = (x, *target)
            np_fn = _numpy.upsample_bilinear_fwd
            nat_fn = _native.upsample_bilinear_fwd if _native else None
        else:
            np_args = (x, *target)
            np_fn = _numpy.upsample_bilinear_bwd
            nat_fn = _native.upsample_bilinear_bwd if _native else None
        t_np = run(np_fn, *np_args, repeats=args.repeats)
        if nat_fn is None:
            print(f"{label:<28} {t_np * 1e6:>8.1f}us {'n/a':>10} {'':>8}")
            continue
        t_nat = run(nat_fn, *np_args, repeats=args.repeats)
        print(f"{label:<28} {t_np * 1e6:>8.1f}us {t_nat * 1e6:>8.1f}us "
              f"{t_np / t_nat:>7.2f}x")
    if _native is None:
        print("\ncompiled kernels not built; showing fallback only")


if __name__ == "__main__":
    main()
