"""Kernel backend selection.

The compiled Cython module supplies the row reductions (layer norm) and the
aggregation sum when it was built and importable; numpy covers the rest. Set ``FEDMIM_PURE_PYTHON=1`` to force
the numpy path (the benchmark and the backend-parity tests rely on this).

All kernels take C-contiguous float32 arrays: 2-D ``(rows, features)`` for
the row-wise kernels and 1-D for the element-wise ones.
"""

import os

from fedmim import _numpy_kernels

try:
    if os.environ.get("FEDMIM_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from fedmim import _kernels as _compiled
except ImportError:
    _compiled = None

numpy_backend = _numpy_kernels
compiled_backend = _compiled
BACKEND = "cython" if _compiled is not None else "numpy"

# Element-wise transcendentals stay on numpy even when the extension is
# present: its SIMD exp/tanh beat a scalar libm loop (benchmarks/bench_kernels.py).
NUMPY_ONLY = ("gelu_fwd", "gelu_bwd", "softmax_fwd", "softmax_bwd")
KERNELS = ("layer_norm_fwd", "layer_norm_bwd", "weighted_sum") + NUMPY_ONLY


def _pick(name):
    if _compiled is None or name in NUMPY_ONLY:
        return getattr(_numpy_kernels, name)
    return getattr(_compiled, name)


layer_norm_fwd = _pick("layer_norm_fwd")
layer_norm_bwd = _pick("layer_norm_bwd")
gelu_fwd = _pick("gelu_fwd")
gelu_bwd = _pick("gelu_bwd")
softmax_fwd = _pick("softmax_fwd")
softmax_bwd = _pick("softmax_bwd")
weighted_sum = _pick("weighted_sum")
