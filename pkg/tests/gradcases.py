"""Random-shape finite-difference cases for every differentiable op."""

from __future__ import annotations

import numpy as np

from fedmim import tensor as T
from fedmim.tensor import Tensor

from oracles import numeric_grad, rel_error

SEEDS = range(20)
H = 1e-3
TOL = 1e-3


def _shape(rng, ndim_lo=1, ndim_hi=3, lo=1, hi=4):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=int(rng.integers(ndim_lo, ndim_hi + 1))))


def _t(rng, shape, lo=None, hi=None):
    if lo is None:
        data = rng.standard_normal(shape)
    else:
        data = rng.uniform(lo, hi, size=shape)
    return Tensor(data.astype(np.float32), requires_grad=True)


def _broadcast_pair(rng):
    shape = _shape(rng, 1, 3)
    other = list(shape)
    for i in range(len(other)):
        if rng.random() < 0.3:
            other[i] = 1
    if rng.random() < 0.3 and len(other) > 1:
        other = other[1:]
    return shape, tuple(other)


def case_add(rng):
    a, b = _broadcast_pair(rng)
    return [_t(rng, a), _t(rng, b)], T.add


def case_sub(rng):
    a, b = _broadcast_pair(rng)
    return [_t(rng, a), _t(rng, b)], T.sub


def case_mul(rng):
    a, b = _broadcast_pair(rng)
    return [_t(rng, a), _t(rng, b)], T.mul


def case_div(rng):
    a, b = _broadcast_pair(rng)
    return [_t(rng, a), _t(rng, b, 0.5, 2.0)], T.div


def case_scale(rng):
    c = float(rng.uniform(-2, 2))
    return [_t(rng, _shape(rng))], lambda a: T.scale(a, c)


def case_exp(rng):
    return [_t(rng, _shape(rng))], T.exp


def case_log(rng):
    return [_t(rng, _shape(rng), 0.5, 3.0)], T.log


def case_power(rng):
    p = float(rng.choice([2.0, 3.0, 0.5, -1.0, 1.5]))
    return [_t(rng, _shape(rng), 0.5, 2.0)], lambda a: T.power(a, p)


def case_sigmoid(rng):
    return [_t(rng, _shape(rng))], T.sigmoid


def case_gelu(rng):
    return [_t(rng, _shape(rng))], T.gelu


def case_reshape(rng):
    shape = _shape(rng, 2, 3)
    return [_t(rng, shape)], lambda a: T.reshape(a, (-1,))


def case_transpose(rng):
    shape = _shape(rng, 2, 4, hi=3)
    axes = tuple(int(i) for i in rng.permutation(len(shape)))
    return [_t(rng, shape)], lambda a: T.transpose(a, axes)


def case_swap_last(rng):
    return [_t(rng, _shape(rng, 2, 3))], T.swap_last


def case_index(rng):
    shape = _shape(rng, 2, 3, lo=2)
    i = int(rng.integers(shape[0]))
    return [_t(rng, shape)], lambda a: a[i]


def case_concat(rng):
    shape = list(_shape(rng, 1, 3))
    axis = int(rng.integers(len(shape)))
    other = list(shape)
    other[axis] = int(rng.integers(1, 4))
    return [_t(rng, tuple(shape)), _t(rng, tuple(other))], lambda a, b: T.concat([a, b], axis=axis)


def case_gather_rows(rng):
    b, n, d = (int(x) for x in rng.integers(1, 4, size=3))
    n += 2
    idx = np.stack([rng.permutation(n)[:n - 1] for _ in range(b)])
    return [_t(rng, (b, n, d))], lambda a: T.gather_rows(a, idx)


def case_upsample2x(rng):
    b, h, w, c = (int(x) for x in rng.integers(1, 3, size=4))
    return [_t(rng, (b, h, w, c))], T.upsample2x


def case_matmul(rng):
    m, k, n = (int(x) for x in rng.integers(1, 4, size=3))
    batch = _shape(rng, 0, 2, hi=2) if rng.random() < 0.6 else ()
    bshape = (k, n) if rng.random() < 0.5 else batch + (k, n)
    return [_t(rng, batch + (m, k)), _t(rng, bshape)], T.matmul


def case_linear(rng):
    lead = _shape(rng, 1, 2, hi=3)
    i, o = (int(x) for x in rng.integers(1, 5, size=2))
    return [_t(rng, lead + (i,)), _t(rng, (i, o)), _t(rng, (o,))], T.linear


def case_sum_all(rng):
    return [_t(rng, _shape(rng))], T.sum_all


def case_mean_all(rng):
    return [_t(rng, _shape(rng))], T.mean_all


def case_mean_axis(rng):
    shape = _shape(rng, 2, 3)
    axis = int(rng.integers(len(shape)))
    return [_t(rng, shape)], lambda a: T.mean_axis(a, axis)


def case_softmax(rng):
    return [_t(rng, _shape(rng, 1, 3, lo=2))], T.softmax


def case_layer_norm(rng):
    # d = 2 is degenerate: the normalised pair is +-1 whatever x is
    shape = _shape(rng, 1, 2, lo=3)
    d = shape[-1]
    return [_t(rng, shape), _t(rng, (d,)), _t(rng, (d,))], T.layer_norm


def case_mse_subset(rng):
    b, n, d = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
    mask = rng.random((b, n)) < 0.5
    mask[0, 0] = True
    return [_t(rng, (b, n, d)), _t(rng, (b, n, d))], lambda p, t: T.mse_subset(p, t, mask)


def case_softmax_cross_entropy(rng):
    # scalar float32 losses: keep the element count small so rounding of the
    # loss value stays below the tolerance after dividing by 2h
    b, c = int(rng.integers(1, 4)), int(rng.integers(2, 5))
    labels = rng.integers(0, c, size=b)
    return [_t(rng, (b, c))], lambda x: T.softmax_cross_entropy(x, labels)


def case_bce_with_logits(rng):
    shape = _shape(rng, 1, 2)
    y = (rng.random(shape) < 0.5).astype(np.float32)
    return [_t(rng, shape)], lambda x: T.bce_with_logits(x, y)


def case_focal_with_logits(rng):
    shape = _shape(rng, 1, 2, hi=3)
    y = (rng.random(shape) < 0.5).astype(np.float32)
    return [_t(rng, shape)], lambda x: T.focal_with_logits(x, y)


CASES = {name[len("case_"):]: fn for name, fn in sorted(globals().items()) if name.startswith("case_")}


def check(op: str, seed: int) -> float:
    """Largest norm-relative error between analytic and numeric gradients."""
    rng = np.random.default_rng([seed, sum(map(ord, op))])
    inputs, fn = CASES[op](rng)
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape).astype(np.float32)
    T.backward(T.sum_all(T.mul(out, Tensor(proj))))
    analytic = [t.grad.copy() for t in inputs]
    proj64 = proj.astype(np.float64)

    def loss():
        return float((fn(*inputs).data.astype(np.float64) * proj64).sum())

    worst = 0.0
    for t, g in zip(inputs, analytic):
        worst = max(worst, rel_error(g, numeric_grad(loss, t.data, H)))
    return worst
