"""Compiled and pure-numpy kernels agree; the backend switch works."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockvit import _kernels_py as py
from blockvit import kernels

cy = pytest.importorskip("blockvit._kernels")

shapes = st.tuples(st.integers(1, 9), st.integers(1, 17))


def arr(rng, shape, dtype):
    return rng.normal(0, 2, shape).astype(dtype)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
class TestParity:
    @settings(max_examples=30, deadline=None)
    @given(shape=shapes, seed=st.integers(0, 10_000), temp=st.floats(0.05, 3.0))
    def test_softmax(self, dtype, tol, shape, seed, temp):
        rng = np.random.default_rng(seed)
        x, dy = arr(rng, shape, dtype), arr(rng, shape, dtype)
        y = py.softmax_fwd(x, 1 / temp)
        np.testing.assert_allclose(cy.softmax_fwd(x, 1 / temp), y, rtol=tol, atol=tol)
        np.testing.assert_allclose(cy.softmax_bwd(y, dy, 1 / temp), py.softmax_bwd(y, dy, 1 / temp), rtol=tol, atol=tol)

    @settings(max_examples=30, deadline=None)
    @given(shape=shapes, seed=st.integers(0, 10_000))
    def test_layer_norm(self, dtype, tol, shape, seed):
        rng = np.random.default_rng(seed)
        x, dy = arr(rng, shape, dtype), arr(rng, shape, dtype)
        g, b = arr(rng, shape[1], dtype), arr(rng, shape[1], dtype)
        ref = py.layer_norm_fwd(x, g, b, 1e-6)
        for got, want in zip(cy.layer_norm_fwd(x, g, b, 1e-6), ref):
            np.testing.assert_allclose(got, want, rtol=tol, atol=tol)
        _, xhat, rstd = ref
        for got, want in zip(cy.layer_norm_bwd(dy, xhat, rstd, g), py.layer_norm_bwd(dy, xhat, rstd, g)):
            np.testing.assert_allclose(got, want, rtol=tol * 10, atol=tol * 10)

    @settings(max_examples=30, deadline=None)
    @given(shape=shapes, seed=st.integers(0, 10_000))
    def test_gelu(self, dtype, tol, shape, seed):
        rng = np.random.default_rng(seed)
        x, dy = arr(rng, shape, dtype), arr(rng, shape, dtype)
        np.testing.assert_allclose(cy.gelu_fwd(x), py.gelu_fwd(x), rtol=tol, atol=tol)
        np.testing.assert_allclose(cy.gelu_bwd(x, dy), py.gelu_bwd(x, dy), rtol=tol, atol=tol)


class TestDispatch:
    def test_dtype_preserved(self):
        for dt in (np.float32, np.float64):
            x = np.ones((2, 3, 4), dt)
            assert kernels.softmax_fwd(x, 1.0).dtype == dt
            assert kernels.gelu_fwd(x).shape == (2, 3, 4)

    def test_softmax_rows_sum_to_one(self):
        x = np.random.default_rng(0).normal(size=(3, 5, 7))
        np.testing.assert_allclose(kernels.softmax_fwd(x, 2.0).sum(-1), 1.0, rtol=1e-12)

    def test_env_forces_fallback(self):
        env = dict(os.environ, BLOCKVIT_PURE_PYTHON="1")
        out = subprocess.run([sys.executable, "-c", "from blockvit import kernels; print(kernels.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "python"

    def test_default_prefers_compiled(self):
        env = {k: v for k, v in os.environ.items() if k != "BLOCKVIT_PURE_PYTHON"}
        out = subprocess.run([sys.executable, "-c", "from blockvit import kernels; print(kernels.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "cython"
