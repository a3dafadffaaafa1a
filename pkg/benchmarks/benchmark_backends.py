#!/usr/bin/env python3
"""Compare the compiled covariance kernels against the pure-NumPy fallback.

Times the two kernel entry points at representative sizes (four robots,
full measurement graph) and a full simulated trial end to end with each
backend swapped in. Run from the repository root:

    python3 benchmarks/benchmark_backends.py [--steps N] [--repeat R]
"""

import argparse
import time

import numpy as np

from kdcl import _kernels_pure, kernels
from kdcl.simulate import default_config, run_trial

try:
    from kdcl import _speedups
except ImportError:
    _speedups = None


def _time(fn, *args, repeat):
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best


def micro(repeat):
    rng = np.random.default_rng(0)
    n, m = 16, 36  # four robots, twelve pairwise measurements
    a = rng.normal(size=(n, n))
    p = np.ascontiguousarray(a @ a.T + np.eye(n))
    f = np.ascontiguousarray(rng.normal(size=(n, n)))
    gqg = np.ascontiguousarray(0.01 * np.eye(n))
    h = np.ascontiguousarray(rng.normal(size=(m, n)))
    r = np.ascontiguousarray(0.01 * np.eye(m))
    innov = rng.normal(size=m)

    rows = []
    backends = [("python", _kernels_pure)]
    if _speedups is not None:
        backends.append(("compiled", _speedups))
    for name, impl in backends:
        t_prop = _time(impl.propagate_cov, p, f, gqg, repeat=repeat)
        t_upd = _time(impl.update_cov, p, h, r, innov, repeat=repeat)
        rows.append((name, t_prop * 1e6, t_upd * 1e6))
    return rows


def end_to_end(steps):
    config = default_config(steps=steps, trials=1,
                            filters=("std", "fej", "oc", "kd"))
    results = []
    impls = [("python", _kernels_pure)]
    if _speedups is not None:
        impls.append(("compiled", _speedups))
    original = kernels._impl
    try:
        for name, impl in impls:
            kernels._impl = impl
            run_trial(config, 0)  # warm caches
            t0 = time.perf_counter()
            run_trial(config, 0)
            elapsed = time.perf_counter() - t0
            results.append((name, elapsed, steps * 4 / elapsed))
    finally:
        kernels._impl = original
    return results


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=1000)
    parser.add_argument("--repeat", type=int, default=3000)
    args = parser.parse_args()

    if _speedups is None:
        print("compiled kernels not built; timing the pure backend only")
    print(f"active backend at import: {kernels.backend_name()}")
    print()
    print("kernel micro-benchmark (16-state fleet, 36 measurement rows)")
    print(f"{'backend':>10} {'propagate_cov':>16} {'update_cov':>14}")
    for name, t_prop, t_upd in micro(args.repeat):
        print(f"{name:>10} {t_prop:>13.1f} us {t_upd:>11.1f} us")
    print()
    print(f"end-to-end trial ({args.steps} steps x 4 filters)")
    print(f"{'backend':>10} {'elapsed':>10} {'filter-steps/s':>16}")
    for name, elapsed, rate in end_to_end(args.steps):
        print(f"{name:>10} {elapsed:>8.2f} s {rate:>14.0f}")


if __name__ == "__main__":
    main()
