import os
import subprocess
import sys

import numpy as np
import pytest

from fedmim import kernels

ref = kernels.numpy_backend
ext = kernels.compiled_backend
needs_ext = pytest.mark.skipif(ext is None, reason="compiled extension not built")


def _rows(seed, rows=7, cols=13, scale=3.0):
    return (np.random.default_rng(seed).standard_normal((rows, cols)) * scale).astype(np.float32)


@needs_ext
@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_parity(seed):
    x = _rows(seed)
    y1, r1 = ext.layer_norm_fwd(x, 1e-5)
    y0, r0 = ref.layer_norm_fwd(x, 1e-5)
    np.testing.assert_allclose(y1, y0, rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(r1, r0, rtol=1e-5)
    gy = _rows(seed + 100)
    np.testing.assert_allclose(ext.layer_norm_bwd(gy, y0, r0), ref.layer_norm_bwd(gy, y0, r0), rtol=1e-4, atol=1e-5)


@needs_ext
@pytest.mark.parametrize("seed", range(5))
def test_gelu_parity(seed):
    x = _rows(seed).ravel()
    gy = _rows(seed + 1).ravel()
    np.testing.assert_allclose(ext.gelu_fwd(x), ref.gelu_fwd(x), rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(ext.gelu_bwd(x, gy), ref.gelu_bwd(x, gy), rtol=1e-5, atol=1e-5)


@needs_ext
@pytest.mark.parametrize("seed", range(5))
def test_softmax_parity(seed):
    x = _rows(seed, scale=20.0)
    y = ext.softmax_fwd(x)
    np.testing.assert_allclose(y, ref.softmax_fwd(x), rtol=1e-5, atol=1e-7)
    gy = _rows(seed + 7)
    np.testing.assert_allclose(ext.softmax_bwd(y, gy), ref.softmax_bwd(y, gy), rtol=1e-4, atol=1e-6)


@needs_ext
@pytest.mark.parametrize("k", [1, 2, 5])
def test_weighted_sum_bitwise_across_backends(k):
    rng = np.random.default_rng(k)
    arrays = [rng.standard_normal(1000).astype(np.float32) for _ in range(k)]
    w = rng.dirichlet(np.ones(k)).astype(np.float32)
    assert ext.weighted_sum(arrays, w).tobytes() == ref.weighted_sum(arrays, w).tobytes()


def test_weighted_sum_single_input_with_unit_weight_is_identity():
    a = np.random.default_rng(3).standard_normal(50).astype(np.float32)
    np.testing.assert_array_equal(kernels.weighted_sum([a], np.ones(1, np.float32)), a)


def test_weighted_sum_length_mismatch():
    with pytest.raises(ValueError):
        kernels.weighted_sum([np.ones(3, np.float32), np.ones(4, np.float32)], np.ones(2, np.float32))


def test_pure_python_switch_selects_numpy():
    env = dict(os.environ, FEDMIM_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from fedmim import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
