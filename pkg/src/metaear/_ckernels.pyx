# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Must stay bit-identical to ``_pykernels``."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline double _med3(double a, double b, double c) nogil:
    if a > b:
        a, b = b, a
    if b > c:
        b = c
    return a if a > b else b


def median3(const double[::1] g):
    cdef Py_ssize_t n = g.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    if n == 0:
        return out
    if n == 1:
        o[0] = g[0]
        return out
    with nogil:
        o[0] = g[1]  # median(g1, g0, g1)
        for i in range(1, n - 1):
            o[i] = _med3(g[i - 1], g[i], g[i + 1])
        o[n - 1] = g[n - 2]
    return out


def median3_deviation(const double[::1] g):
    cdef Py_ssize_t n = g.shape[0], i
    med = median3(g)
    dev = np.empty(n, dtype=np.float64)
    cdef double[::1] m = med
    cdef double[::1] d = dev
    cdef double v
    with nogil:
        for i in range(n):
            v = g[i] - m[i]
            d[i] = v if v >= 0 else -v
    return dev, med


def time_varying_resonator(const double[::1] x, const double[::1] b0,
                           const double[::1] a1, const double[::1] a2):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] y = out
    cdef double y1 = 0.0, y2 = 0.0, v
    with nogil:
        for i in range(n):
            v = b0[i] * x[i] - a1[i] * y1 - a2[i] * y2
            y[i] = v
            y2 = y1
            y1 = v
    return out
