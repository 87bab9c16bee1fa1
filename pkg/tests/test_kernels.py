from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metaear import kernels
from metaear.kernels import BACKENDS

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_compiled_backend_active():
    assert kernels.BACKEND == "cython"


@pytest.mark.parametrize("name", sorted(BACKENDS))
@pytest.mark.parametrize("g, expected", [
    ([20, 20, 1500, 20, 20], [20, 20, 20, 20, 20]),
    ([1500, 20, 20], [20, 20, 20]),
    ([1, 3, 2], [3, 2, 3]),
    ([5.0], [5.0]),
    ([1.0, 2.0], [2.0, 1.0]),
])
def test_median3_examples(name, g, expected):
    assert BACKENDS[name].median3(np.asarray(g, float)).tolist() == expected


@given(arrays(np.float64, st.integers(0, 300), elements=finite))
def test_median3_backends_identical(g):
    outs = [BACKENDS[n].median3(g) for n in BACKENDS]
    for o in outs[1:]:
        assert np.array_equal(o, outs[0])


@given(arrays(np.float64, st.integers(3, 300), elements=finite))
def test_median3_deviation_backends_identical(g):
    outs = [BACKENDS[n].median3_deviation(g) for n in BACKENDS]
    for dev, med in outs[1:]:
        assert np.array_equal(dev, outs[0][0]) and np.array_equal(med, outs[0][1])
    assert np.array_equal(outs[0][0], np.abs(g - outs[0][1]))


@given(st.integers(0, 2**32), st.integers(1, 2000))
def test_resonator_backends_identical(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    r = rng.uniform(0.5, 0.99, n)
    theta = rng.uniform(0.05, 3.0, n)
    b0, a1, a2 = 1 - r, -2 * r * np.cos(theta), r * r
    outs = [BACKENDS[k].time_varying_resonator(x, b0, a1, a2) for k in BACKENDS]
    for o in outs[1:]:
        assert np.array_equal(o, outs[0])


def test_resonator_impulse_matches_lfilter():
    from scipy import signal

    n = 64
    x = np.zeros(n)
    x[0] = 1.0
    b0, a1, a2 = np.full(n, 0.5), np.full(n, -1.2), np.full(n, 0.6)
    y = kernels.time_varying_resonator(x, b0, a1, a2)
    assert np.allclose(y, signal.lfilter([0.5], [1, -1.2, 0.6], x), rtol=1e-12, atol=1e-15)
