"""Compare the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Prints one line per kernel
with the best-of-N wall time of each backend and the speed-up.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from metaear.kernels import BACKENDS


def _cases(rng: np.random.Generator):
    curve = rng.uniform(15, 22, 256)
    curve[rng.choice(256, 3, replace=False)] = 1500.0
    n = 16000
    x = rng.standard_normal(n)
    r = np.full(n, 0.97)
    theta = 2 * np.pi * np.linspace(250, 1000, n) / 16000
    coeffs = (1 - r, -2 * r * np.cos(theta), r * r)
    return {
        "median3_deviation (256 bins)": lambda k: k.median3_deviation(curve),
        "median3 (65536 bins)": lambda k, g=rng.standard_normal(65536): k.median3(g),
        "time_varying_resonator (1 s @ 16 kHz)": lambda k: k.time_varying_resonator(x, *coeffs),
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--number", type=int, default=20)
    args = p.parse_args(argv)
    if "cython" not in BACKENDS:
        print("compiled kernels not built; only the numpy fallback is available")
    for name, fn in _cases(np.random.default_rng(0)).items():
        times = {}
        for backend, mod in BACKENDS.items():
            t = timeit.repeat(lambda: fn(mod), repeat=args.repeat, number=args.number)
            times[backend] = min(t) / args.number
        line = "  ".join(f"{b} {1e6 * t:10.1f} us" for b, t in times.items())
        if len(times) == 2:
            line += f"  speed-up {times['python'] / times['cython']:6.1f}x"
        print(f"{name:40s} {line}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
