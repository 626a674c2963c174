import math

import numpy as np
import pytest

from wcebleed.autograd import AdamW, AdamWState, LRSchedule, Tensor, adamw_step, cosine_lr, warmup_cosine_lr


def test_zero_grads_no_decay_leaves_params():
    p = np.array([1.0, -2.0, 3.0])
    before = p.copy()
    adamw_step([p], [np.zeros(3)], AdamWState(weight_decay=0.0), 0.1)
    np.testing.assert_array_equal(p, before)


def test_first_step_is_signed_lr():
    p = np.array([1.0, -2.0, 3.0])
    g = np.array([0.3, -5.0, 1e-3])
    adamw_step([p], [g], AdamWState(), 0.01)
    np.testing.assert_allclose(p - np.array([1.0, -2.0, 3.0]), -0.01 * np.sign(g), rtol=1e-4)


def test_decoupled_decay_applied_to_param():
    p = np.array([2.0])
    adamw_step([p], [np.zeros(1)], AdamWState(weight_decay=0.5), 0.1)
    assert p[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def scalar_adam(x0, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Independent per-coordinate Adam recurrence on f(x) = x^2."""
    x, m, v, traj = x0, 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = 2 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        traj.append(x)
    return traj


def test_quadratic_descent_matches_scalar_recurrence():
    x = np.array([0.6, 0.8])
    state = AdamWState()
    norms = []
    for _ in range(200):
        adamw_step([x], [2 * x], state, 0.01)
        norms.append(np.linalg.norm(x))
    ref = np.array([scalar_adam(0.6, 200, 0.01), scalar_adam(0.8, 200, 0.01)]).T
    np.testing.assert_allclose(x, ref[-1], atol=1e-12)
    assert np.all(np.diff(norms[10:]) < 0)
    assert norms[-1] < 1e-2


def test_optimizer_deterministic():
    def run():
        rng = np.random.default_rng(0)
        w = Tensor(rng.normal(size=(4, 3)).astype(np.float32), requires_grad=True)
        opt = AdamW([w], weight_decay=0.01)
        for _ in range(20):
            opt.zero_grad()
            ((w * w).sum()).backward()
            opt.step(1e-2)
        return w.data.copy()

    assert np.array_equal(run(), run())


def test_shape_mismatch():
    with pytest.raises(ValueError):
        adamw_step([np.zeros(3)], [np.zeros(4)], AdamWState(), 0.1)


def test_cosine_boundaries_exact():
    s = LRSchedule(1e-4, 1e-6, 1000)
    assert cosine_lr(0, s) == 0.0001
    assert cosine_lr(1000, s) == 1e-6
    assert cosine_lr(500, s) == pytest.approx((1e-4 + 1e-6) / 2, rel=1e-12)
    with pytest.raises(ValueError):
        cosine_lr(1001, s)


def test_cosine_monotone():
    s = LRSchedule(1e-3, 0.0, 50)
    lrs = [cosine_lr(i, s) for i in range(51)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_warmup_ramp_endpoints():
    s = LRSchedule(1e-3, 0.0, 1000)
    assert warmup_cosine_lr(0, s, 100) == pytest.approx(1e-3 / 100)
    assert warmup_cosine_lr(99, s, 100) == pytest.approx(1e-3)
    assert warmup_cosine_lr(100, s, 100) == 1e-3
    assert warmup_cosine_lr(1000, s, 100) == 0.0


def test_schedule_validation():
    with pytest.raises(ValueError):
        LRSchedule(1e-4, 1e-3, 10)
    with pytest.raises(ValueError):
        LRSchedule(1e-4, 0.0, 0)
