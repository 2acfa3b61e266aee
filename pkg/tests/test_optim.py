"""Optimizer and schedule tests.

The AdamW trajectory is checked against `reference_adamw`, an
independent scalar transcription of the update equations kept free of
any code from diagar.optim.
"""

import math

import numpy as np
import pytest

from diagar.autodiff import Tensor
from diagar.optim import AdamW, LRSchedule, ParamGroup


def reference_adamw(p, grads, lr, b1=0.9, b2=0.95, eps=1e-8, wd=0.05, decay=True):
    """Oracle: textbook decoupled AdamW, one scalar loop per step."""
    p = np.array(p, dtype=np.float64)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        g = np.asarray(g, dtype=np.float64)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        step = m_hat / (np.sqrt(v_hat) + eps)
        if decay:
            step = step + wd * p
        p = p - lr * step
    return p


def test_adamw_matches_reference_trajectory():
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal((3, 4))
    grads = [rng.standard_normal((3, 4)) for _ in range(7)]
    p = Tensor(w0.copy().astype(np.float64), requires_grad=True)
    opt = AdamW([ParamGroup([("w", p)])])
    for g in grads:
        p.grad = g.astype(np.float64)
        opt.step(rate=1e-2)
    expected = reference_adamw(w0, grads, 1e-2)
    assert np.allclose(p.data, expected, atol=1e-12)


def test_adamw_vector_params_skip_weight_decay():
    rng = np.random.default_rng(1)
    b0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(4)]
    p = Tensor(b0.copy().astype(np.float64), requires_grad=True)
    opt = AdamW([ParamGroup([("b", p)])])
    for g in grads:
        p.grad = g.astype(np.float64)
        opt.step(rate=3e-3)
    expected = reference_adamw(b0, grads, 3e-3, decay=False)
    assert np.allclose(p.data, expected, atol=1e-12)


def test_adamw_zero_grad_zero_decay_is_identity():
    p = Tensor(np.ones(4), requires_grad=True)
    opt = AdamW([ParamGroup([("b", p)])], weight_decay=0.0)
    before = p.data.copy()
    p.grad = np.zeros(4)
    opt.step(rate=1.0)
    assert np.array_equal(p.data, before)


def test_adamw_group_multiplier_scales_update():
    w0 = np.full((2, 2), 0.5)
    g = np.full((2, 2), 0.3)
    slow = Tensor(w0.copy(), requires_grad=True)
    fast = Tensor(w0.copy(), requires_grad=True)
    opt = AdamW(
        [
            ParamGroup([("slow", slow)], multiplier=0.2),
            ParamGroup([("fast", fast)], multiplier=1.0),
        ],
        weight_decay=0.0,
    )
    slow.grad = g.copy()
    fast.grad = g.copy()
    opt.step(rate=1e-2)
    # first AdamW step has magnitude ~ lr regardless of grad scale;
    # the multiplier must scale it exactly.
    d_slow = w0 - slow.data
    d_fast = w0 - fast.data
    assert np.allclose(d_slow, 0.2 * d_fast, atol=1e-12)


def test_adamw_reconfigure_keeps_moments():
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    q = Tensor(np.ones((2, 2)), requires_grad=True)
    opt = AdamW([ParamGroup([("p", p)])], weight_decay=0.0)
    p.grad = np.full((2, 2), 0.5)
    opt.step(1e-2)
    t_before = opt.state["p"]["t"]
    opt.reconfigure([ParamGroup([("p", p)]), ParamGroup([("q", q)])])
    p.grad = np.full((2, 2), 0.5)
    q.grad = np.full((2, 2), 0.5)
    opt.step(1e-2)
    assert opt.state["p"]["t"] == t_before + 1
    assert opt.state["q"]["t"] == 1


def test_adamw_rejects_duplicate_names():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        AdamW([ParamGroup([("x", p)]), ParamGroup([("x", p)])])


def test_schedule_warmup_then_cosine():
    sched = LRSchedule(base_rate=1.0, total_steps=100, warmup_steps=10)
    # warmup climbs linearly and reaches base at its last step
    rates = [sched.rate_at(s) for s in range(10)]
    assert rates == pytest.approx([(s + 1) / 10 for s in range(10)])
    # cosine: starts at base, hits half at the midpoint, ends near zero
    assert sched.rate_at(10) == pytest.approx(1.0)
    assert sched.rate_at(55) == pytest.approx(0.5)
    assert sched.rate_at(99) == pytest.approx(
        0.5 * (1 + math.cos(math.pi * 89 / 90))
    )
    # monotone decay after warmup
    post = [sched.rate_at(s) for s in range(10, 100)]
    assert all(a >= b for a, b in zip(post, post[1:]))


def test_schedule_no_warmup():
    sched = LRSchedule(base_rate=2.0, total_steps=4, warmup_steps=0)
    assert sched.rate_at(0) == pytest.approx(2.0)


def test_schedule_range_errors():
    sched = LRSchedule(base_rate=1.0, total_steps=10, warmup_steps=2)
    with pytest.raises(ValueError):
        sched.rate_at(-1)
    with pytest.raises(ValueError):
        sched.rate_at(10)
    with pytest.raises(ValueError):
        LRSchedule(base_rate=1.0, total_steps=5, warmup_steps=6)
    with pytest.raises(ValueError):
        LRSchedule(base_rate=1.0, total_steps=0)
