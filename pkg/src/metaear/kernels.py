"""Kernel dispatch: compiled extension when importable, numpy fallback otherwise."""

from __future__ import annotations

import numpy as np

from . import _pykernels

try:
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:  # extension not built
    _impl = _pykernels
    BACKEND = "python"

BACKENDS = {"python": _pykernels}
if BACKEND == "cython":
    BACKENDS["cython"] = _impl


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def median3(g) -> np.ndarray:
    """Three-point running median; an edge bin takes its single neighbour twice."""
    return _impl.median3(_f64(g))


def median3_deviation(g) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(|g - median3(g)|, median3(g))``."""
    return _impl.median3_deviation(_f64(g))


def time_varying_resonator(x, b0, a1, a2) -> np.ndarray:
    """All-pole biquad ``y[n] = b0[n] x[n] - a1[n] y[n-1] - a2[n] y[n-2]``."""
    return _impl.time_varying_resonator(_f64(x), _f64(b0), _f64(a1), _f64(a2))
