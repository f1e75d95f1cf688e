import math

import numpy as np
import pytest

from incdet3d import autodiff as ad
from incdet3d.autodiff import Tensor, backward, reset_tape
from incdet3d.errors import ConfigError
from incdet3d.optim import Adam
from incdet3d.rng import SeededRng


def scalar_adam_reference(grads, lr, b1=0.9, b2=0.999, eps=1e-8, total=None):
    """Textbook Adam on one scalar, step by step."""
    w, m, v = 0.0, 0.0, 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        if total is None:
            lr_t = lr
        else:
            frac = min((t - 1) / total, 1.0)
            lr_t = 0.5 * lr * (1.0 + math.cos(math.pi * frac))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr_t * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        trace.append(w)
    return trace


def test_matches_scalar_reference():
    for seed in range(10):
        rng = SeededRng(seed)
        grads = rng.normal((30,), 0.0, 2.0)
        p = Tensor(np.zeros(()), requires_grad=True)
        opt = Adam([p], lr=0.05)
        ref = scalar_adam_reference(list(grads), 0.05)
        for g, want in zip(grads, ref):
            p.grad = np.asarray(g, dtype=np.float64)
            opt.step()
            assert abs(float(p.data) - want) < 1e-12


def test_matches_reference_with_cosine_schedule():
    for seed in range(5):
        rng = SeededRng(seed)
        grads = rng.normal((40,), 0.0, 1.0)
        p = Tensor(np.zeros(()), requires_grad=True)
        opt = Adam([p], lr=0.1, total_steps=40)
        ref = scalar_adam_reference(list(grads), 0.1, total=40)
        for g, want in zip(grads, ref):
            p.grad = np.asarray(g)
            opt.step()
            assert abs(float(p.data) - want) < 1e-12


def test_cosine_schedule_endpoints():
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam([p], lr=0.2, total_steps=10)
    assert opt.current_lr() == pytest.approx(0.2)
    opt.step_count = 5
    assert opt.current_lr() == pytest.approx(0.1)
    opt.step_count = 10
    assert opt.current_lr() == pytest.approx(0.0, abs=1e-15)
    opt.step_count = 25  # past the horizon the rate stays floored at zero
    assert opt.current_lr() == pytest.approx(0.0, abs=1e-15)


def test_converges_on_quadratic():
    w = Tensor(np.zeros(()), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(100):
        reset_tape()
        loss = ad.sq_l2_sum(ad.sub(w, Tensor(np.float64(3.0))))
        backward(loss, [w])
        opt.step()
        opt.zero_grad()
    assert abs(float(w.data) - 3.0) < 0.1


def test_zero_grad_leaves_parameter_bit_identical():
    rng = SeededRng(4)
    p = Tensor(rng.normal((5, 3)), requires_grad=True)
    q = Tensor(rng.normal((4,)), requires_grad=True)
    before_p = p.data.copy()
    opt = Adam([p, q], lr=0.5)
    for _ in range(20):
        p.grad = np.zeros((5, 3))  # masked parameter: moments decay, data frozen
        q.grad = np.ones(4)
        opt.step()
    assert p.data.tobytes() == before_p.tobytes()
    assert not np.array_equal(q.data, np.zeros(4))


def test_none_grad_treated_as_zero():
    p = Tensor(np.ones(2), requires_grad=True)
    opt = Adam([p], lr=0.3)
    opt.step()
    assert p.data.tobytes() == np.ones(2).tobytes()


def test_partial_zero_rows_still_move():
    # a gradient that is zero in some rows but not all must update the tensor
    p = Tensor(np.zeros((3, 2)), requires_grad=True)
    opt = Adam([p], lr=0.1)
    g = np.zeros((3, 2))
    g[1] = 1.0
    p.grad = g
    opt.step()
    assert np.all(p.data[0] == 0.0) and np.all(p.data[2] == 0.0)
    assert np.all(p.data[1] != 0.0)


def test_config_validation():
    p = Tensor(np.zeros(1), requires_grad=True)
    with pytest.raises(ConfigError):
        Adam([p], lr=0.0)
    with pytest.raises(ConfigError):
        Adam([p], lr=0.1, beta1=1.0)
    with pytest.raises(ConfigError):
        Adam([p], lr=0.1, total_steps=0)
