#!/usr/bin/env python3
"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--n 200000] [--repeat 5]

Each kernel runs once untimed (JIT compile), then ``--repeat`` times; the
best wall time is reported along with the largest disagreement between the
two paths. Setting CAPTIME_DISABLE_NUMBA=1 only changes the default path, so
both columns are always measured here.
"""
import argparse
import time

import numpy as np

from captime import kernels
from captime._jit import HAVE_NUMBA


def best_time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(n, rng):
    x = rng.uniform(0.1, 50.0, n)
    y = rng.normal(size=n)
    mu = rng.normal(size=n)
    sigma = rng.uniform(0.1, 3.0, n)
    nu = rng.uniform(1.1, 40.0, n)
    z = rng.normal(scale=3.0, size=n)
    q = rng.uniform(0.01, 0.99, n // 20)
    nu_q = rng.uniform(1.1, 40.0, n // 20)
    s = rng.dirichlet(np.ones(8), size=n // 8)
    return {
        "lgamma": lambda nb: kernels.lgamma(x, use_numba=nb),
        "digamma": lambda nb: kernels.digamma(x, use_numba=nb),
        "t_logpdf": lambda nb: kernels.t_logpdf(y, mu, sigma, nu, use_numba=nb),
        "t_cdf": lambda nb: kernels.t_cdf(z, nu, use_numba=nb),
        "t_ppf": lambda nb: kernels.t_ppf(q, nu_q, use_numba=nb),
        "topk_mask": lambda nb: kernels.topk_mask(s, 2, use_numba=nb),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200_000, help="elements per kernel call")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy path can be timed")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<10s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fn in cases(args.n, rng).items():
        t_np = best_time(lambda: fn(False), args.repeat)
        if HAVE_NUMBA:
            t_nb = best_time(lambda: fn(True), args.repeat)
            diff = float(np.max(np.abs(fn(True) - fn(False))))
            print(f"{name:<10s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:7.1f}x {diff:11.2e}")
        else:
            print(f"{name:<10s} {t_np * 1e3:10.2f} {'-':>10s} {'-':>8s} {'-':>11s}")


if __name__ == "__main__":
    main()
