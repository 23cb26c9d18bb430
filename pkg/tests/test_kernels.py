import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hhklab import _kernels_py as py
from hhklab import kernels

cy = pytest.importorskip("hhklab._kernels")


def fields(n, seed):
    rng = np.random.default_rng(seed)
    size = (1 << (n + 1)) - 1
    return rng, size


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 9), seed=st.integers(0, 2**31), start=st.integers(0, 9))
def test_backends_agree(n, seed, start):
    rng, size = fields(n, seed)
    lump = rng.exponential(0.1, size)
    rate = rng.exponential(0.3, size)
    src = rng.standard_normal(size)
    fac = 1 + 0.1 * rng.standard_normal(size)
    level = rng.uniform(-1, 2, size)
    dec = np.full(n, math.exp(-0.3 / n))
    gain = 1 - dec
    lw = np.full(n + 1, 0.7)
    p = float(rng.uniform(0, 0.5))
    start = min(start, n)
    pairs = [
        (py.forward_satisfaction(lump, rate, dec, gain, lw, 0.4, n),
         cy.forward_satisfaction(lump, rate, dec, gain, lw, 0.4, n)),
        (py.backward_accumulate(src, p, n), cy.backward_accumulate(src, p, n)),
        (py.backward_accumulate(src, p, n, stop=start), cy.backward_accumulate(src, p, n, start)),
        (py.forward_product(fac, n), cy.forward_product(fac, n)),
        (py.forward_sum(src, lump, n), cy.forward_sum(src, lump, n)),
        (py.running_max(level, 0.3, dec, n, start=start),
         cy.running_max(level, 0.3, dec, n, start)),
    ]
    for a, b in pairs:
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


def test_selected_backend():
    assert kernels.BACKEND in ("cython", "python")


def test_backward_accumulate_small_case():
    src = np.array([1.0, 2.0, 3.0])
    out = py.backward_accumulate(src, 0.25, 1)
    assert out[0] == pytest.approx(1.0 + 0.75 * 2.0 + 0.25 * 3.0)
    assert np.array_equal(out[1:], src[1:])
