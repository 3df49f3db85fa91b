import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irnet.autodiff import Parameter
from irnet.exceptions import ContractError, NumericError
from irnet.optim import AdamW, OptimizerState, adamw_step, warmup_lr, warmup_steps


def naive_adamw(p, grads, lr, b1, b2, eps, wd):
    """Scalar loop version of decoupled-decay Adam over a gradient sequence."""
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        p = p - lr * wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_zero_grad_no_decay_leaves_params():
    params, state = {"w": np.array([1.0, -2.0])}, OptimizerState()
    adamw_step(params, {"w": np.zeros(2)}, state, lr=0.1)
    assert params["w"].tolist() == [1.0, -2.0] and state.step == 1


def test_zero_grad_decay_shrinks():
    params = {"w": np.array([1.0, -2.0])}
    adamw_step(params, {"w": np.zeros(2)}, OptimizerState(), lr=0.1, weight_decay=0.5)
    assert np.allclose(params["w"], [0.95, -1.9], rtol=0, atol=1e-15)


def test_first_step_moves_by_lr():
    params = {"w": np.array([1.0])}
    adamw_step(params, {"w": np.array([1.0])}, OptimizerState(), lr=0.1)
    assert params["w"][0] == pytest.approx(0.9, abs=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(-3, 3),
       st.floats(1e-4, 0.1), st.floats(0, 0.1))
def test_matches_scalar_loop(grads, p0, lr, wd):
    params, state = {"w": np.array([p0])}, OptimizerState()
    for g in grads:
        adamw_step(params, {"w": np.array([g])}, state, lr, (0.9, 0.999), 1e-8, wd)
    assert params["w"][0] == pytest.approx(naive_adamw(p0, grads, lr, 0.9, 0.999, 1e-8, wd),
                                           rel=1e-10, abs=1e-12)


def test_non_finite_grad_aborts_without_change():
    params, state = {"a": np.ones(2), "b": np.ones(2)}, OptimizerState()
    with pytest.raises(NumericError):
        adamw_step(params, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, state, lr=0.1)
    assert state.step == 0 and not state.m
    assert params["a"].tolist() == [1.0, 1.0]


def test_bad_inputs():
    with pytest.raises(ContractError):
        adamw_step({"a": np.ones(2)}, {"a": np.ones(3)}, OptimizerState(), lr=0.1)
    with pytest.raises(ContractError):
        adamw_step({"a": np.ones(2)}, {"a": np.ones(2)}, OptimizerState(), lr=0.0)


def test_adamw_class_uses_parameter_grads():
    p = Parameter("p", np.array([2.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad[:] = 3.0
    opt.step()
    assert p.data[0] == pytest.approx(1.9, abs=1e-8)
    opt.zero_grad()
    assert p.grad[0] == 0.0


def test_warmup_schedule():
    total = 3000
    end = warmup_steps(total, 0.05)
    assert end == 150
    assert warmup_lr(end, total, 5e-5) == 5e-5
    assert warmup_lr(end // 2, total, 5e-5) == pytest.approx(2.5e-5)
    assert warmup_lr(0, total, 5e-5) == 0.0
    assert warmup_lr(total, total, 5e-5) == 5e-5
    assert warmup_steps(101, 0.05) == 6  # ceiling
    assert warmup_lr(3, 10, 1.0, 0.0) == 1.0
    with pytest.raises(ContractError):
        warmup_lr(total + 1, total, 1e-3)
