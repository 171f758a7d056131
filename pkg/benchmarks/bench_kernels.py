"""Compare the compiled kernels with the NumPy fallback.

    python benchmarks/bench_kernels.py [--N 400] [--M 1000] [--repeat 5]

Sizes default to one conditional bootstrap at N=400, n=80, M=1000.
"""

import argparse
import timeit

import numpy as np

from ppboot import _pykernels

try:
    from ppboot import _ckernels
except ImportError:
    _ckernels = None


def cases(N, M):
    n = N // 5
    rng = np.random.default_rng(0)
    x = rng.uniform(1, 11, N)
    pi = n * x / x.sum()
    lam = pi / (1 - pi)
    logw = np.log(lam)
    U = rng.random((M, N))
    q = _pykernels.cps_qtable(logw, n)
    forced = np.zeros(N, dtype=np.uint8)
    y = np.sort(rng.normal(size=N))
    mask = _pykernels.pareto_select(U, lam, n)
    probs = np.array([0.5, 0.75])
    return {
        "pareto_select": lambda k: k.pareto_select(U, lam, n),
        "cps_qtable": lambda k: k.cps_qtable(logw, n),
        "cps_first_order": lambda k: k.cps_first_order(q, n),
        "cps_sequential_select": lambda k: k.cps_sequential_select(U, q, forced, n),
        "hajek_stats": lambda k: k.hajek_stats(mask, y, 1 / pi, probs),
    }


def best(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=400)
    ap.add_argument("--M", type=int, default=1000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"N={args.N} n={args.N // 5} M={args.M}")
    print(f"{'kernel':<24}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases(args.N, args.M).items():
        tp = best(lambda: fn(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:<24}{tp * 1e3:>12.3f}{'n/a':>12}{'n/a':>10}")
            continue
        tc = best(lambda: fn(_ckernels), args.repeat)
        print(f"{name:<24}{tp * 1e3:>12.3f}{tc * 1e3:>12.3f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()
