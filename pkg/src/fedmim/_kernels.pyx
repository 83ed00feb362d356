# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Fused float32 kernels for the tensor core.

Every function here has a numpy twin in :mod:`fedmim._numpy_kernels` with the
same signature. Reductions run sequentially left to right in float32.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrtf, expf

cnp.import_array()

cdef float GELU_C = 0.7978845608028654  # sqrt(2 / pi)
cdef float GELU_A = 0.044715


cdef inline float _tanh(float u) noexcept nogil:
    # glibc tanhf is scalar and slow; expf is not. Saturates cleanly at +-1.
    return 1.0 - 2.0 / (1.0 + expf(2.0 * u))


def layer_norm_fwd(float[:, ::1] x, float eps):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    y_arr = np.empty((rows, cols), dtype=np.float32)
    rstd_arr = np.empty(rows, dtype=np.float32)
    cdef float[:, ::1] y = y_arr
    cdef float[::1] rstd = rstd_arr
    cdef float acc, mean, d, var, r
    cdef float inv_n = 1.0 / cols
    with nogil:
        for i in range(rows):
            acc = 0.0
            for j in range(cols):
                acc = acc + x[i, j]
            mean = acc * inv_n
            acc = 0.0
            for j in range(cols):
                d = x[i, j] - mean
                acc = acc + d * d
            var = acc * inv_n
            r = 1.0 / sqrtf(var + eps)
            rstd[i] = r
            for j in range(cols):
                y[i, j] = (x[i, j] - mean) * r
    return y_arr, rstd_arr


def layer_norm_bwd(float[:, ::1] gy, float[:, ::1] y, float[::1] rstd):
    cdef Py_ssize_t rows = gy.shape[0], cols = gy.shape[1], i, j
    gx_arr = np.empty((rows, cols), dtype=np.float32)
    cdef float[:, ::1] gx = gx_arr
    cdef float s1, s2, m1, m2
    cdef float inv_n = 1.0 / cols
    with nogil:
        for i in range(rows):
            s1 = 0.0
            s2 = 0.0
            for j in range(cols):
                s1 = s1 + gy[i, j]
                s2 = s2 + gy[i, j] * y[i, j]
            m1 = s1 * inv_n
            m2 = s2 * inv_n
            for j in range(cols):
                gx[i, j] = rstd[i] * (gy[i, j] - m1 - y[i, j] * m2)
    return gx_arr


def gelu_fwd(float[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    y_arr = np.empty(n, dtype=np.float32)
    cdef float[::1] y = y_arr
    cdef float v
    with nogil:
        for i in range(n):
            v = x[i]
            y[i] = 0.5 * v * (1.0 + _tanh(GELU_C * (v + GELU_A * v * v * v)))
    return y_arr


def gelu_bwd(float[::1] x, float[::1] gy):
    cdef Py_ssize_t n = x.shape[0], i
    gx_arr = np.empty(n, dtype=np.float32)
    cdef float[::1] gx = gx_arr
    cdef float v, t, dt
    with nogil:
        for i in range(n):
            v = x[i]
            t = _tanh(GELU_C * (v + GELU_A * v * v * v))
            dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            gx[i] = gy[i] * (0.5 * (1.0 + t) + 0.5 * v * dt)
    return gx_arr


def softmax_fwd(float[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    y_arr = np.empty((rows, cols), dtype=np.float32)
    cdef float[:, ::1] y = y_arr
    cdef float m, acc, e
    with nogil:
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, cols):
                if x[i, j] > m:
                    m = x[i, j]
            acc = 0.0
            for j in range(cols):
                e = expf(x[i, j] - m)
                y[i, j] = e
                acc = acc + e
            acc = 1.0 / acc
            for j in range(cols):
                y[i, j] = y[i, j] * acc
    return y_arr


def softmax_bwd(float[:, ::1] y, float[:, ::1] gy):
    cdef Py_ssize_t rows = y.shape[0], cols = y.shape[1], i, j
    gx_arr = np.empty((rows, cols), dtype=np.float32)
    cdef float[:, ::1] gx = gx_arr
    cdef float dot
    with nogil:
        for i in range(rows):
            dot = 0.0
            for j in range(cols):
                dot = dot + gy[i, j] * y[i, j]
            for j in range(cols):
                gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return gx_arr


def weighted_sum(list arrays, float[::1] weights):
    cdef Py_ssize_t k, i, n, count = len(arrays)
    cdef float[::1] src
    cdef float w
    first = np.ascontiguousarray(arrays[0], dtype=np.float32).ravel()
    n = first.shape[0]
    out_arr = np.empty(n, dtype=np.float32)
    cdef float[::1] out = out_arr
    src = first
    w = weights[0]
    for i in range(n):
        out[i] = w * src[i]
    for k in range(1, count):
        src = np.ascontiguousarray(arrays[k], dtype=np.float32).ravel()
        if src.shape[0] != n:
            raise ValueError("weighted_sum: length mismatch")
        w = weights[k]
        with nogil:
            for i in range(n):
                out[i] = out[i] + w * src[i]
    return out_arr
