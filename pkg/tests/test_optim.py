import numpy as np
import pytest

from tspretrain.errors import NonFiniteGradient
from tspretrain.optim import Adam
from tspretrain.tensor import Tensor


def make_param(values):
    p = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
    return p


def test_first_step_moves_by_lr():
    # With constant gradient the very first Adam step is -lr * g/|g| up to eps.
    p = make_param([1.0])
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.array([2.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9], atol=1e-6)


def test_three_steps_match_hand_recurrence():
    # Independent scalar recurrence in plain python floats.
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    grads = [1.5, -0.7, 0.2]
    x, m, v = 0.3, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        x = x - lr * mh / (vh**0.5 + eps)

    p = make_param([0.3])
    opt = Adam({"p": p}, lr=lr, beta1=b1, beta2=b2, eps=eps)
    for g in grads:
        p.grad = np.array([g])
        opt.step()
    np.testing.assert_allclose(p.data, [x], rtol=1e-12)
    assert opt.state.t == 3


def test_zero_lr_leaves_params_bitwise_unchanged():
    values = np.array([0.1, -2.5, 3.75], dtype=np.float32)
    p = Tensor(values.copy(), requires_grad=True)
    opt = Adam({"p": p}, lr=0.0)
    p.grad = np.array([1.0, 2.0, 3.0], dtype=np.float32)
    opt.step()
    assert p.data.tobytes() == values.tobytes()
    assert opt.state.t == 1
    assert np.any(opt.state.m["p"] != 0)  # moments still advance


def test_non_finite_gradient_rejected_before_mutation():
    p = make_param([1.0, 2.0])
    q = make_param([3.0])
    opt = Adam({"p": p, "q": q}, lr=0.1)
    p.grad = np.array([1.0, np.nan])
    q.grad = np.array([1.0])
    with pytest.raises(NonFiniteGradient):
        opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    np.testing.assert_array_equal(q.data, [3.0])
    assert opt.state.t == 0
    assert np.all(opt.state.m["q"] == 0)


def test_inf_gradient_rejected():
    p = make_param([1.0])
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.array([np.inf])
    with pytest.raises(NonFiniteGradient):
        opt.step()


def test_missing_gradient_rejected():
    p = make_param([1.0])
    opt = Adam({"p": p}, lr=0.1)
    with pytest.raises(NonFiniteGradient):
        opt.step()


def test_zero_grad_resets():
    p = make_param([1.0])
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.array([5.0])
    opt.zero_grad()
    np.testing.assert_array_equal(p.grad, [0.0])


def test_optimizer_reduces_quadratic_loss():
    p = make_param([5.0, -3.0])
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        p.grad = 2.0 * p.data
        opt.step()
    assert np.abs(p.data).max() < 1e-2
