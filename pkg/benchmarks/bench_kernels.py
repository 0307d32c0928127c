"""Compare the numba and numpy mixture kernels on representative batch sizes.

Usage:
    python3 benchmarks/bench_kernels.py [--repeats 5] [--json out.json]

Prints the best-of-``repeats`` wall time per kernel and backend, the
speedup, and the max absolute difference between the two outputs.
"""

import argparse
import json
import platform
import sys
import timeit

import numpy as np

from mclc_lab import kernels
from mclc_lab.prior import circle_prior

CASES = (
    ("score d=2 n=1000 K=3", 2, 1000, 3),
    ("score d=8 n=1000 K=3", 8, 1000, 3),
    ("em d=8 n=1000 K=8", 8, 1000, 8),
    ("score d=32 n=256 K=16", 32, 256, 16),
)


def _args(d, n, k, rng):
    pr = circle_prior(d, n_components=k)
    x = rng.standard_normal((n, d)) * 3.0
    v = rng.standard_normal((n, d))
    return x, v, pr.kernel_args


def bench(repeats=5, seed=0):
    if kernels.NUMBA_KERNELS is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(seed)
    rows = []
    for label, d, n, k in CASES:
        x, v, kargs = _args(d, n, k, rng)
        for name in ("mixture_logpdf", "mixture_score", "mixture_score_hvp", "mixture_responsibilities"):
            call = {
                "mixture_score_hvp": lambda f: f(x, v, *kargs),
            }.get(name, lambda f: f(x, *kargs))
            f_np, f_nb = kernels.NUMPY_KERNELS[name], kernels.NUMBA_KERNELS[name]
            call(f_nb)  # compile outside the timed region
            t_np = min(timeit.repeat(lambda: call(f_np), number=10, repeat=repeats)) / 10
            t_nb = min(timeit.repeat(lambda: call(f_nb), number=10, repeat=repeats)) / 10
            a, b = call(f_np), call(f_nb)
            a = a if isinstance(a, tuple) else (a,)
            b = b if isinstance(b, tuple) else (b,)
            diff = max(float(np.max(np.abs(p - q))) for p, q in zip(a, b))
            rows.append({"case": label, "kernel": name, "numpy_s": t_np, "numba_s": t_nb,
                         "speedup": t_np / t_nb, "max_abs_diff": diff})
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--json", help="also write the table as JSON")
    args = p.parse_args(argv)
    rows = bench(args.repeats)
    print(f"python {platform.python_version()}, numpy {np.__version__}")
    print(f"{'case':<24} {'kernel':<26} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max diff':>10}")
    for r in rows:
        print(f"{r['case']:<24} {r['kernel']:<26} {1e3 * r['numpy_s']:>10.3f} {1e3 * r['numba_s']:>10.3f} "
              f"{r['speedup']:>8.2f} {r['max_abs_diff']:>10.1e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
