"""Pure-Python/numpy versions of the compiled kernels.

Results are bit-identical to the Cython build: the median kernels only select
and subtract, and the resonator loop performs the same double-precision
operations in the same order.
"""

from __future__ import annotations

import numpy as np


def median3(g: np.ndarray) -> np.ndarray:
    g = np.ascontiguousarray(g, dtype=np.float64)
    if g.size < 2:
        return g.copy()
    # an edge bin sees its only neighbour on both sides
    left = np.concatenate(([g[1]], g[:-1]))
    right = np.concatenate((g[1:], [g[-2]]))
    lo = np.minimum(left, g)
    hi = np.maximum(left, g)
    return np.maximum(lo, np.minimum(hi, right))


def median3_deviation(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    med = median3(g)
    return np.abs(np.asarray(g, dtype=np.float64) - med), med


def time_varying_resonator(x, b0, a1, a2) -> np.ndarray:
    n = len(x)
    y = np.empty(n, dtype=np.float64)
    y1 = 0.0
    y2 = 0.0
    xs = np.asarray(x, dtype=np.float64).tolist()
    b0s = np.asarray(b0, dtype=np.float64).tolist()
    a1s = np.asarray(a1, dtype=np.float64).tolist()
    a2s = np.asarray(a2, dtype=np.float64).tolist()
    for i in range(n):
        v = b0s[i] * xs[i] - a1s[i] * y1 - a2s[i] * y2
        y[i] = v
        y2 = y1
        y1 = v
    return y
