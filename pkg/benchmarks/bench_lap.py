#!/usr/bin/env python3
"""Benchmark the compiled assignment kernel against the numpy fallback.

Usage:
    python benchmarks/bench_lap.py [--sizes 200,400,800,1600,3600] [--repeats 3]

Both backends run the same algorithm and must return identical
assignments; the table reports wall time per solve.
"""
import argparse
import time

import numpy as np

from craterkit._lapjv_py import lapjv as lapjv_py

try:
    from craterkit._lapjv import lapjv as lapjv_cy
except ImportError:
    lapjv_cy = None


def time_solver(solver, cost, repeats):
    best = float("inf")
    result = None
    for _ in range(repeats):
        work = np.ascontiguousarray(cost.copy())
        t0 = time.perf_counter()
        result = solver(work)
        best = min(best, time.perf_counter() - t0)
    return best, result


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="200,400,800,1600,3600")
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    sizes = [int(s) for s in args.sizes.split(",")]
    rng = np.random.default_rng(args.seed)

    header = f"{'n':>6} | {'cython (s)':>11} | {'python (s)':>11} | {'speedup':>8} | agree"
    print(header)
    print("-" * len(header))
    for n in sizes:
        cost = rng.random((n, n))
        t_py, (x_py, _, _) = time_solver(lapjv_py, cost, args.repeats)
        if lapjv_cy is None:
            print(f"{n:>6} | {'(not built)':>11} | {t_py:>11.4f} | {'-':>8} | -")
            continue
        t_cy, (x_cy, _, _) = time_solver(lapjv_cy, cost, args.repeats)
        agree = bool(np.array_equal(x_cy, x_py))
        print(f"{n:>6} | {t_cy:>11.4f} | {t_py:>11.4f} | {t_py / t_cy:>8.1f} | {agree}")


if __name__ == "__main__":
    main()
