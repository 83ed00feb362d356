"""SGD with momentum and AdamW over named parameter maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedmim.tensor import DTYPE, Tensor

KINDS = ("sgd-momentum", "adamw")


@dataclass
class OptimizerState:
    kind: str
    lr: float
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.0
    momentum: float = 0.0
    eps: float = 1e-8
    step_count: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}; expected one of {KINDS}")


def init_optimizer(kind: str, params: dict, trainable=None, **hyper) -> OptimizerState:
    """Create moment buffers for exactly the trainable parameter names."""
    names = list(params) if trainable is None else list(trainable)
    state = OptimizerState(kind=kind, **hyper)
    for name in names:
        shape = params[name].shape
        if kind == "adamw":
            state.buffers[name] = (np.zeros(shape, DTYPE), np.zeros(shape, DTYPE))
        else:
            state.buffers[name] = (np.zeros(shape, DTYPE),)
    return state


def optimizer_step(state: OptimizerState, params: dict[str, Tensor]) -> None:
    """Apply one update in place to every trainable parameter, using ``p.grad``.

    AdamW follows Loshchilov & Hutter: the decay term ``lr * wd * p`` is applied
    to the parameter directly, not folded into the moment estimates.
    """
    missing = [n for n in state.buffers if params[n].grad is None]
    if missing:
        raise ValueError(f"optimizer_step: missing gradient for trainable params {missing[:5]}")
    state.step_count += 1
    lr = DTYPE(state.lr)
    if state.kind == "sgd-momentum":
        mu = DTYPE(state.momentum)
        wd = DTYPE(state.weight_decay)
        for name, (buf,) in state.buffers.items():
            p = params[name]
            g = p.grad + wd * p.data if state.weight_decay else p.grad
            buf *= mu
            buf += g
            p.data = p.data - lr * buf
        return

    b1, b2 = DTYPE(state.betas[0]), DTYPE(state.betas[1])
    t = state.step_count
    bc1 = DTYPE(1.0 - state.betas[0] ** t)
    bc2 = DTYPE(1.0 - state.betas[1] ** t)
    eps = DTYPE(state.eps)
    decay = DTYPE(1.0 - state.lr * state.weight_decay)
    one = DTYPE(1.0)
    for name, (m, v) in state.buffers.items():
        p = params[name]
        g = p.grad
        m *= b1
        m += (one - b1) * g
        v *= b2
        v += (one - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = p.data * decay - lr * update
