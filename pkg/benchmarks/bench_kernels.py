"""Time the numba and numpy kernel paths on the same inputs.

    python3 benchmarks/bench_kernels.py [--trials 20000] [--rows 200000]
"""
import argparse
import time

import numpy as np

from varlat import _kernels as K


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_menu(trials, n, repeat):
    rng = np.random.default_rng(0)
    ages = rng.exponential(1.0, n)
    arrivals = np.sort(rng.exponential(1.0, n).cumsum())
    rem = rng.exponential(1.0, (trials, n))
    keys = rng.random((trials, n))
    out = {}
    for name, fn in (("numpy", K.menu_lp_np), ("numba", K.menu_lp_nb)):
        fn(ages, arrivals, rem[:10], keys[:10], K.ELDEST, 2.0)  # warm up / compile
        out[name] = best_of(lambda: fn(ages, arrivals, rem, keys, K.ELDEST, 2.0), repeat)
    a = K.menu_lp_np(ages, arrivals, rem, keys, K.ELDEST, 2.0)
    b = K.menu_lp_nb(ages, arrivals, rem, keys, K.ELDEST, 2.0)
    return out, float(np.max(np.abs(a - b)))


def bench_comoment(rows, k, repeat):
    X = np.random.default_rng(1).normal(size=(rows, k))
    out = {}
    results = {}
    for name, fn in (("numpy", K.comoment_update_np), ("numba", K.comoment_update_nb)):
        fn(0, np.zeros(k), np.zeros((k, k)), X[:10])

        def run():
            mean, cxp = np.zeros(k), np.zeros((k, k))
            fn(0, mean, cxp, X)
            results[name] = cxp / rows

        out[name] = best_of(run, repeat)
    return out, float(np.max(np.abs(results["numpy"] - results["numba"])))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=20_000)
    ap.add_argument("--menu-size", type=int, default=8)
    ap.add_argument("--rows", type=int, default=200_000)
    ap.add_argument("--cols", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        print("numba not installed; both columns time the numpy path")
    for label, (times, diff) in (
        (f"menu_lp trials={args.trials} n={args.menu_size}", bench_menu(args.trials, args.menu_size, args.repeat)),
        (f"comoment rows={args.rows} k={args.cols}", bench_comoment(args.rows, args.cols, args.repeat)),
    ):
        print(f"{label:40s} numpy {times['numpy'] * 1e3:9.2f} ms   numba {times['numba'] * 1e3:9.2f} ms"
              f"   speedup {times['numpy'] / times['numba']:6.1f}x   max |diff| {diff:.2e}")


if __name__ == "__main__":
    main()
