import numpy as np
import pytest

from simtlab.autodiff import Tensor
from simtlab.errors import NumericError
from simtlab.optim import AdamState, adam_step


def test_zero_grad_leaves_params_and_moments_untouched():
    p = Tensor(np.arange(4.0), requires_grad=True)
    state = AdamState([("p", p)], lr=0.0004)
    p.grad = np.zeros(4)
    adam_step(state)
    assert np.array_equal(p.data, np.arange(4.0))
    assert np.all(state.m["p"] == 0.0) and np.all(state.v["p"] == 0.0)
    assert state.step_count == 1


def test_first_step_moves_by_learning_rate():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=8), requires_grad=True)
    before = p.data.copy()
    state = AdamState([("p", p)], lr=0.0004)
    p.grad = rng.normal(size=8) * 3.0
    adam_step(state)
    delta = np.abs(p.data - before)
    # bias correction makes the first update lr * g / (|g| + eps')
    assert np.all(np.abs(delta - 0.0004) <= 1e-8)


def test_second_step_never_larger_than_first():
    p = Tensor(np.zeros(5), requires_grad=True)
    state = AdamState([("p", p)], lr=0.0004)
    g = np.full(5, 0.7)
    p.grad = g.copy()
    adam_step(state)
    first = np.abs(p.data)
    prev = p.data.copy()
    p.grad = g.copy()
    adam_step(state)
    second = np.abs(p.data - prev)
    assert np.all(second <= first + 1e-9)


def test_nan_gradient_rejected_with_diagnostic():
    p = Tensor(np.zeros(3), requires_grad=True)
    state = AdamState([("badparam", p)], lr=0.01)
    p.grad = np.array([0.0, np.nan, 0.0])
    with pytest.raises(NumericError, match="badparam"):
        adam_step(state)
    # rejected update leaves everything untouched
    assert state.step_count == 0
    assert np.all(p.data == 0.0)


def test_none_grad_treated_as_zero():
    p = Tensor(np.ones(2), requires_grad=True)
    q = Tensor(np.ones(2), requires_grad=True)
    state = AdamState([("p", p), ("q", q)], lr=0.1)
    p.grad = np.ones(2)
    q.grad = None
    adam_step(state)
    assert np.all(q.data == 1.0)
    assert np.all(p.data < 1.0)
