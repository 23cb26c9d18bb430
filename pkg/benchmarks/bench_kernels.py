"""Compare the compiled and numpy tree passes.

Run with ``python3 benchmarks/bench_kernels.py [--n 12 16 20] [--repeat 5]``.
Prints the best wall time per kernel and backend and the speedup.
"""

import argparse
import math
import timeit

import numpy as np

from hhklab import _kernels_py as py

try:
    from hhklab import _kernels as cy
except ImportError:
    cy = None


def cases(n, rng):
    size = (1 << (n + 1)) - 1
    lump = rng.exponential(0.01, size)
    rate = rng.exponential(0.1, size)
    src = rng.standard_normal(size)
    fac = 1 + 0.01 * rng.standard_normal(size)
    level = rng.uniform(0, 2, size)
    dec = np.full(n, math.exp(-0.5 / n))
    gain = 1 - dec
    lump_w = np.full(n + 1, 0.5)
    return {
        "forward_satisfaction": lambda m: m.forward_satisfaction(lump, rate, dec, gain, lump_w, 1.0, n),
        "backward_accumulate": lambda m: m.backward_accumulate(src, 0.05, n),
        "forward_product": lambda m: m.forward_product(fac, n),
        "forward_sum": lambda m: m.forward_sum(src, fac, n),
        "running_max": lambda m: m.running_max(level, 0.5, dec, n),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--n", type=int, nargs="+", default=[12, 16, 20])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':22s} {'n':>3s} {'python [ms]':>12s} {'cython [ms]':>12s} {'speedup':>8s}")
    for n in args.n:
        for name, fn in cases(n, rng).items():
            tp = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat))
            if cy is None:
                print(f"{name:22s} {n:3d} {tp * 1e3:12.3f} {'n/a':>12s} {'n/a':>8s}")
                continue
            a, b = fn(py), fn(cy)
            if not np.allclose(a, b, rtol=1e-12, atol=1e-14):
                raise SystemExit(f"{name}: backends disagree at n={n}")
            tc = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat))
            print(f"{name:22s} {n:3d} {tp * 1e3:12.3f} {tc * 1e3:12.3f} {tp / tc:8.1f}")


if __name__ == "__main__":
    main()
