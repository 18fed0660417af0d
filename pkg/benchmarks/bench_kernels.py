"""Compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--steps 200000] [--repeat 5]

Times the Euler-Maruyama loop and the contrast statistics on the same inputs,
checks that both backends agree, and prints a small table.
"""

import argparse
import sys
import timeit

import numpy as np

from qlabayes import _fallback
from qlabayes.simulator import gaussian_increments

try:
    from qlabayes import _kernels
except ImportError:
    _kernels = None


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--steps", type=int, default=200_000, help="Euler steps (substeps included)")
    ap.add_argument("--substeps", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1

    delta = 1e-3
    drift = np.array([0.0, 1.0])
    d0, d1 = 1.0, 0.5
    dw = np.ravel(gaussian_increments(7, args.steps)) * np.sqrt(delta)
    path_c, _ = _kernels.euler_polytrig(0.0, 1.0, 1.0, drift, d0, d1, delta, args.substeps, dw)
    path_p, _ = _fallback.euler_polytrig(0.0, 1.0, 1.0, drift, d0, d1, delta, args.substeps, dw)
    stats_c = _kernels.polytrig_stats(path_c, drift, d0, d1)
    stats_p = _fallback.polytrig_stats(path_c, drift, d0, d1)
    path_err = float(np.max(np.abs(path_c - path_p)))
    stats_err = max(abs(a - b) / max(1.0, abs(b)) for a, b in zip(stats_c, stats_p))

    rows = []
    for name, fc, fp in (
        ("euler_polytrig", lambda: _kernels.euler_polytrig(0.0, 1.0, 1.0, drift, d0, d1, delta, args.substeps, dw),
         lambda: _fallback.euler_polytrig(0.0, 1.0, 1.0, drift, d0, d1, delta, args.substeps, dw)),
        ("polytrig_stats", lambda: _kernels.polytrig_stats(path_c, drift, d0, d1),
         lambda: _fallback.polytrig_stats(path_c, drift, d0, d1)),
    ):
        tc, tp = _best(fc, args.repeat), _best(fp, args.repeat)
        rows.append((name, tc, tp))

    print(f"steps={args.steps} substeps={args.substeps} observations={len(path_c) - 1}")
    print(f"max |path diff| = {path_err:.3g}, max rel stats diff = {stats_err:.3g}")
    print(f"{'kernel':<16}{'compiled ms':>14}{'python ms':>12}{'speedup':>10}")
    for name, tc, tp in rows:
        print(f"{name:<16}{1e3 * tc:>14.3f}{1e3 * tp:>12.3f}{tp / tc:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
