"""Dense float32 tensors with reverse-mode automatic differentiation.

Every differentiable operation is a module-level function that computes its
result with numpy (or a fused kernel from :mod:`fedmim.kernels`) and, when any
input requires a gradient, attaches a :class:`Node` recording the inputs and a
closure that maps the output gradient to input gradients. Node ids increase
monotonically, so sorting the reachable nodes by id yields a valid
topological order; :func:`backward` replays that :class:`Tape` in reverse.

Gradients accumulate into ``Tensor.grad`` for every tensor that requires one;
call :func:`zero_grad` between optimisation steps.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from fedmim import kernels

DTYPE = np.float32
LN_EPS = 1e-5

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf reaches an operation."""


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Nodes reachable from a root, in creation (topological) order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: "Tensor") -> "Tape":
        seen: dict[int, Node] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or node.id in seen:
                continue
            seen[node.id] = node
            stack.extend(node.inputs)
        return cls([seen[k] for k in sorted(seen)])


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, order="C", copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=DTYPE)
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_inputs(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{op}: non-finite input of shape {t.shape}")


def _result(op: str, out: np.ndarray, inputs: tuple, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    t = Tensor._wrap(out, requires_grad=needs)
    if needs:
        t._node = Node(next(_node_ids), op, inputs, backward)
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# element-wise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    _check_inputs("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    _check_inputs("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    _check_inputs("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    _check_inputs("div", a, b)
    out = a.data / b.data

    def bw(g):
        gb = -g * out / b.data
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(gb, b.shape)

    return _result("div", out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    _check_inputs("scale", a)
    c32 = DTYPE(c)
    return _result("scale", a.data * c32, (a,), lambda g: (g * c32,))


def exp(a: Tensor) -> Tensor:
    _check_inputs("exp", a)
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    _check_inputs("log", a)
    if (a.data <= 0).any():
        raise NonFiniteError("log: non-positive input")
    return _result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def power(a: Tensor, p: float) -> Tensor:
    """Element-wise ``a ** p`` for a constant exponent; ``a`` must be positive unless p is an integer."""
    _check_inputs("power", a)
    p32 = DTYPE(p)
    out = np.power(a.data, p32)
    return _result("power", out, (a,), lambda g: (g * p32 * np.power(a.data, p32 - DTYPE(1)),))


def sigmoid(a: Tensor) -> Tensor:
    _check_inputs("sigmoid", a)
    out = _sigmoid_np(a.data)
    return _result("sigmoid", out, (a,), lambda g: (g * out * (DTYPE(1) - out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))."""
    _check_inputs("gelu", a)
    flat = a.data.reshape(-1)
    out = kernels.gelu_fwd(flat).reshape(a.shape)

    def bw(g):
        return (kernels.gelu_bwd(flat, np.ascontiguousarray(g, dtype=DTYPE).reshape(-1)).reshape(a.shape),)

    return _result("gelu", out, (a,), bw)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result("transpose", out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def index(a: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    try:
        out = np.array(a.data[idx], dtype=DTYPE)
    except IndexError as exc:
        raise ShapeError(f"index: {exc} for shape {a.shape}") from None

    def bw(g):
        ga = np.zeros(a.shape, dtype=DTYPE)
        ga[idx] += g
        return (ga,)

    return _result("index", out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    _check_inputs("concat", *tensors)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result("concat", out, tuple(tensors), bw)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 1 per batch entry: ``out[b, i] = a[b, idx[b, i]]``.

    ``a`` is ``[B, N, D]`` and ``idx`` an integer array ``[B, M]``.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: tensor {a.shape} with index {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ShapeError(f"gather_rows: index out of range for axis of length {a.shape[1]}")
    _check_inputs("gather_rows", a)
    batch = np.arange(a.shape[0])[:, None]
    out = a.data[batch, idx]

    def bw(g):
        ga = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(ga, (batch, idx), g)
        return (ga,)

    return _result("gather_rows", out, (a,), bw)


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of a ``[B, H, W, C]`` grid."""
    if a.ndim != 4:
        raise ShapeError(f"upsample2x: expected [B, H, W, C], got {a.shape}")
    out = a.data.repeat(2, axis=1).repeat(2, axis=2)
    b, h, w, c = a.shape

    def bw(g):
        return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _result("upsample2x", out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    _check_inputs("matmul", a, b)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("matmul", out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def sum_all(a: Tensor) -> Tensor:
    _check_inputs("sum", a)
    out = np.array(a.data.sum(dtype=DTYPE), dtype=DTYPE)
    return _result("sum", out, (a,), lambda g: (np.full(a.shape, g, dtype=DTYPE),))


def mean_all(a: Tensor) -> Tensor:
    _check_inputs("mean", a)
    n = DTYPE(a.size)
    out = np.array(a.data.mean(dtype=DTYPE), dtype=DTYPE)
    return _result("mean", out, (a,), lambda g: (np.full(a.shape, g / n, dtype=DTYPE),))


def mean_axis(a: Tensor, axis: int) -> Tensor:
    _check_inputs("mean_axis", a)
    axis = axis % a.ndim
    n = DTYPE(a.shape[axis])
    out = a.data.mean(axis=axis, dtype=DTYPE)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).astype(DTYPE),)

    return _result("mean_axis", out, (a,), bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    _check_inputs("softmax", a)
    x2 = a.data.reshape(-1, a.shape[-1])
    y2 = kernels.softmax_fwd(x2)

    def bw(g):
        g2 = np.ascontiguousarray(g, dtype=DTYPE).reshape(-1, a.shape[-1])
        return (kernels.softmax_bwd(y2, g2).reshape(a.shape),)

    return _result("softmax", y2.reshape(a.shape), (a,), bw)


def layer_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply the optional affine ``weight``/``bias``."""
    _check_inputs("layer_norm", a)
    if weight is not None and weight.shape != (a.shape[-1],):
        raise ShapeError(f"layer_norm: weight {weight.shape} for input {a.shape}")
    x2 = a.data.reshape(-1, a.shape[-1])
    y2, rstd = kernels.layer_norm_fwd(x2, float(eps))

    def bw(g):
        g2 = np.ascontiguousarray(g, dtype=DTYPE).reshape(-1, a.shape[-1])
        return (kernels.layer_norm_bwd(g2, y2, rstd).reshape(a.shape),)

    out = _result("layer_norm", y2.reshape(a.shape), (a,), bw)
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# losses


def mse_subset(pred: Tensor, target, mask: np.ndarray) -> Tensor:
    """Mean squared error over the rows selected by a boolean ``mask``.

    ``pred``/``target`` are ``[B, N, P]`` and ``mask`` is ``[B, N]``. The value
    is the mean over selected rows of each row's mean squared error; rows
    outside the mask never enter the computation, so perturbing them leaves
    the result bitwise unchanged and their gradient exactly zero.
    """
    target = as_tensor(target)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.ndim != 3 or mask.shape != pred.shape[:2]:
        raise ShapeError(f"mse_subset: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("mse_subset: empty index subset")
    _check_inputs("mse_subset", pred, target)
    diff = pred.data[mask] - target.data[mask]
    out = np.array((diff * diff).mean(dtype=DTYPE), dtype=DTYPE)
    coef = DTYPE(2.0 / diff.size)

    def bw(g):
        gsel = g * coef * diff
        gp = np.zeros(pred.shape, dtype=DTYPE)
        gp[mask] = gsel
        gt = np.zeros(target.shape, dtype=DTYPE)
        gt[mask] = -gsel
        return gp, gt

    return _result("mse_subset", out, (pred, target), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; ``logits`` is ``[B, C]``, ``labels`` integer ``[B]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    _check_inputs("softmax_cross_entropy", logits)
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, dtype=DTYPE))
    rows = np.arange(x.shape[0])
    out = np.array((logz - shifted[rows, labels]).mean(dtype=DTYPE), dtype=DTYPE)

    def bw(g):
        p = np.exp(shifted - logz[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / DTYPE(x.shape[0])),)

    return _result("softmax_cross_entropy", out, (logits,), bw)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean element-wise sigmoid binary cross-entropy."""
    targets = np.asarray(targets, dtype=DTYPE)
    if targets.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape}, targets {targets.shape}")
    _check_inputs("bce_with_logits", logits)
    x = logits.data
    # max(x, 0) - x*t + log(1 + exp(-|x|))
    per = np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    out = np.array(per.mean(dtype=DTYPE), dtype=DTYPE)
    n = DTYPE(x.size)

    def bw(g):
        return ((_sigmoid_np(x) - targets) * (g / n),)

    return _result("bce_with_logits", out, (logits,), bw)


def focal_with_logits(logits: Tensor, targets, gamma: float = 2.0, alpha: float = 1.0) -> Tensor:
    """Mean focal loss ``-alpha * (1 - p_t)**gamma * log(p_t)`` on sigmoid probabilities.

    With ``s = 2t - 1`` and ``p_t = sigmoid(s * x)`` the gradient per element
    is ``alpha * s * (gamma * (1 - p_t)**gamma * p_t * log(p_t) - (1 - p_t)**(gamma + 1))``.
    """
    targets = np.asarray(targets, dtype=DTYPE)
    if targets.shape != logits.shape:
        raise ShapeError(f"focal_with_logits: logits {logits.shape}, targets {targets.shape}")
    _check_inputs("focal_with_logits", logits)
    s = DTYPE(2) * targets - DTYPE(1)
    z = s * logits.data
    log_pt = -(np.maximum(-z, 0) + np.log1p(np.exp(-np.abs(z))))
    p_t = np.exp(log_pt)
    one_m = DTYPE(1) - p_t
    g32, a32 = DTYPE(gamma), DTYPE(alpha)
    per = -a32 * one_m ** g32 * log_pt
    out = np.array(per.mean(dtype=DTYPE), dtype=DTYPE)
    n = DTYPE(per.size)

    def bw(g):
        d = a32 * s * (g32 * one_m ** g32 * p_t * log_pt - one_m ** (g32 + DTYPE(1)))
        return (d * (g / n),)

    return _result("focal_with_logits", out, (logits,), bw)


# ---------------------------------------------------------------------------
# gradient bookkeeping


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if root._node is None:
        raise ValueError("backward: root has no recorded operations")
    tape = Tape.from_root(root)
    pending: dict[int, np.ndarray] = {root._node.id: np.ones(root.shape, dtype=DTYPE)}
    for node in reversed(tape.nodes):
        g = pending.pop(node.id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=DTYPE).reshape(inp.shape)
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif inp._node.id in pending:
                pending[inp._node.id] = pending[inp._node.id] + gi
            else:
                pending[inp._node.id] = gi


def zero_grad(params) -> None:
    items = params.values() if isinstance(params, dict) else params
    for p in items:
        p.grad = None
