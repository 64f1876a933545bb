"""Compiled vs NumPy-fallback timings for the hot kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Shapes match the desk-scale workloads: messages over a 500-node k=6 graph
with self-loops (f=32 tokens of width 32) and neighbor searches for the
5,000-sample pretraining layouts.
"""
import argparse
import timeit

import numpy as np

from fimp import kernels
from fimp.numerics import Rng


def workloads(rng):
    n, deg, f, d = 500, 7, 32, 32
    order = rng.permutation(n * deg).astype(np.int64)
    indptr = np.arange(0, n * deg + 1, deg, dtype=np.int64)
    messages = rng.normal((n * deg, f * d)).astype(np.float32)
    scores = rng.normal((n * deg, 1)).astype(np.float32)
    coords2 = rng.uniform((5000, 2))
    coords_small = rng.uniform((500, 2))
    return {
        "segment_sum (3500 x 1024 -> 500)": lambda b: kernels.segment_sum(messages, order, indptr, b),
        "segment_max (3500 x 1024 -> 500)": lambda b: kernels.segment_max(messages, order, indptr, b),
        "segment_max (3500 x 1 -> 500)": lambda b: kernels.segment_max(scores, order, indptr, b),
        "knn k=6 (500 pts)": lambda b: kernels.knn(coords_small, 6, b),
        "knn k=6 (5000 pts)": lambda b: kernels.knn(coords2, 6, b),
        "radius r=0.02 (5000 pts)": lambda b: kernels.radius_pairs(coords2, 0.02, b),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if kernels.BACKEND != "compiled":
        print("compiled extension not available; only the fallback can be timed")
    print(f"{'kernel':<36}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, fn in workloads(Rng(0)).items():
        py = min(timeit.repeat(lambda: fn("python"), number=1, repeat=args.repeat)) * 1e3
        if kernels.BACKEND == "compiled":
            c = min(timeit.repeat(lambda: fn("compiled"), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<36}{py:>12.2f}{c:>14.2f}{py / c:>9.1f}x")
        else:
            print(f"{name:<36}{py:>12.2f}{'-':>14}{'-':>10}")


if __name__ == "__main__":
    main()
