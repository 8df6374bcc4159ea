"""Benchmark the compiled pixel kernels against their pure-numpy fallbacks.

Run from the repository root:

    python3 benchmarks/bench_kernels.py [--repeats 7]

Each kernel is checked for exact agreement between the two implementations
before timing; timings are best-of-N wall clock on identical inputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from resdistill.kernels import COMPILED, fallback

try:
    from resdistill.kernels import _core
except ImportError:
    _core = None


def best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def make_cases(seed: int = 0):
    rng = np.random.default_rng(seed)
    img = rng.random((512, 512, 3))
    n_seg = 500
    base = 512.0
    seg = (
        rng.uniform(0, base, n_seg), rng.uniform(0, base, n_seg),
        rng.uniform(0, base, n_seg), rng.uniform(0, base, n_seg),
        rng.uniform(0.1, 0.4, n_seg),
    )
    return [
        ("resize_bilinear 512->128", lambda impl: impl.resize_bilinear(img, 128, 128)),
        ("luminance_hist 512x512", lambda impl: impl.luminance_hist(img)),
        ("add_line_segments 500", lambda impl: impl.add_line_segments(
            np.zeros((512, 512)), *seg)),
    ]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7)
    args = parser.parse_args()

    if _core is None:
        print("compiled extension not importable; showing fallback timings only")
    print(f"default import uses: {'compiled' if COMPILED else 'fallback'}\n")
    header = f"{'kernel':28s} {'fallback':>12s} {'compiled':>12s} {'speedup':>9s}  parity"
    print(header)
    print("-" * len(header))
    for name, call in make_cases():
        t_fb = best_of(lambda: call(fallback), args.repeats)
        if _core is None:
            print(f"{name:28s} {t_fb * 1e3:10.3f}ms {'-':>12s} {'-':>9s}  -")
            continue
        a, b = call(fallback), call(_core)
        parity = "exact" if np.array_equal(np.asarray(a), np.asarray(b)) else "DIFFERS"
        t_c = best_of(lambda: call(_core), args.repeats)
        print(f"{name:28s} {t_fb * 1e3:10.3f}ms {t_c * 1e3:10.3f}ms "
              f"{t_fb / t_c:8.1f}x  {parity}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
