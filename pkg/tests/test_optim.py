import math

import numpy as np
import pytest

from fedmim import optim
from fedmim.tensor import Tensor


def _param(value, grad):
    p = Tensor(np.array(value, np.float32), requires_grad=True)
    p.grad = np.array(grad, np.float32)
    return {"w": p}


def test_sgd_single_step():
    params = _param([1.0], [1.0])
    optim.optimizer_step(optim.init_optimizer("sgd-momentum", params, lr=0.1), params)
    assert params["w"].data[0] == pytest.approx(0.9)


def test_sgd_zero_grad_is_noop():
    params = _param([1.5, -2.0], [0.0, 0.0])
    optim.optimizer_step(optim.init_optimizer("sgd-momentum", params, lr=0.1, momentum=0.9), params)
    np.testing.assert_array_equal(params["w"].data, [1.5, -2.0])


def _adamw_scalar(p, grads, lr, b1, b2, eps, wd):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat, vhat = m / (1 - b1 ** t), v / (1 - b2 ** t)
        p = p * (1 - lr * wd) - lr * mhat / (math.sqrt(vhat) + eps)
    return p


@pytest.mark.parametrize("wd", [0.0, 0.05])
def test_adamw_matches_scalar_oracle(wd):
    grads = [0.3, -1.2, 0.7, 2.0, -0.1]
    params = _param([0.5], [0.0])
    state = optim.init_optimizer("adamw", params, lr=1e-2, weight_decay=wd, betas=(0.9, 0.999))
    for g in grads:
        params["w"].grad = np.array([g], np.float32)
        optim.optimizer_step(state, params)
    assert state.step_count == len(grads)
    assert params["w"].data[0] == pytest.approx(_adamw_scalar(0.5, grads, 1e-2, 0.9, 0.999, 1e-8, wd), rel=1e-5)


def test_adamw_first_step_moves_by_lr_against_sign():
    params = _param([0.0, 0.0], [5.0, -0.01])
    optim.optimizer_step(optim.init_optimizer("adamw", params, lr=0.01), params)
    np.testing.assert_allclose(params["w"].data, [-0.01, 0.01], rtol=1e-4)


def test_frozen_params_untouched_and_missing_grad_errors():
    params = {**_param([1.0], [1.0]), "frozen": Tensor(np.array([3.0], np.float32))}
    state = optim.init_optimizer("adamw", params, trainable=["w"], lr=0.1)
    optim.optimizer_step(state, params)
    assert params["frozen"].data[0] == 3.0 and set(state.buffers) == {"w"}
    params["w"].grad = None
    with pytest.raises(ValueError):
        optim.optimizer_step(state, params)


def test_unknown_kind():
    with pytest.raises(ValueError):
        optim.init_optimizer("lion", {}, lr=0.1)
