"""Pure-numpy twins of the compiled kernels in ``_kernels.pyx``."""

import numpy as np

GELU_C = np.float32(0.7978845608028654)  # sqrt(2 / pi)
GELU_A = np.float32(0.044715)
_HALF = np.float32(0.5)
_ONE = np.float32(1.0)
_THREE = np.float32(3.0)


def layer_norm_fwd(x, eps):
    mean = x.mean(axis=-1, keepdims=True, dtype=np.float32)
    d = x - mean
    var = (d * d).mean(axis=-1, keepdims=True, dtype=np.float32)
    rstd = _ONE / np.sqrt(var + np.float32(eps))
    return d * rstd, rstd[:, 0]


def layer_norm_bwd(gy, y, rstd):
    m1 = gy.mean(axis=-1, keepdims=True, dtype=np.float32)
    m2 = (gy * y).mean(axis=-1, keepdims=True, dtype=np.float32)
    return rstd[:, None] * (gy - m1 - y * m2)


def gelu_fwd(x):
    return _HALF * x * (_ONE + np.tanh(GELU_C * (x + GELU_A * x * x * x)))


def gelu_bwd(x, gy):
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    dt = (_ONE - t * t) * GELU_C * (_ONE + _THREE * GELU_A * x * x)
    return gy * (_HALF * (_ONE + t) + _HALF * x * dt)


def softmax_fwd(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True, dtype=np.float32)


def softmax_bwd(y, gy):
    dot = (gy * y).sum(axis=-1, keepdims=True, dtype=np.float32)
    return y * (gy - dot)


def weighted_sum(arrays, weights):
    # Same float32 op sequence as the compiled loop, so results match bitwise.
    out = weights[0] * np.ascontiguousarray(arrays[0], dtype=np.float32).ravel()
    for w, arr in zip(weights[1:], arrays[1:]):
        src = np.ascontiguousarray(arr, dtype=np.float32).ravel()
        if src.shape[0] != out.shape[0]:
            raise ValueError("weighted_sum: length mismatch")
        out = out + w * src
    return out
