"""Adam updates and the warmup/decay learning-rate schedule."""

import numpy as np
import pytest

from tonetrans.optim import (BETA1, BETA2, EPS, AdamState, adam_step,
                             lr_schedule)
from tonetrans.tensor import NonFiniteError, Tensor


def hand_adam(param, grads, lr):
    """Straightforward reference implementation, scalar loop."""
    m = np.zeros_like(param)
    v = np.zeros_like(param)
    p = param.copy()
    for t, g in enumerate(grads, start=1):
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * v + (1 - BETA2) * g * g
        mh = m / (1 - BETA1 ** t)
        vh = v / (1 - BETA2 ** t)
        p = p - lr * mh / (np.sqrt(vh) + EPS)
    return p


def test_first_step_moves_by_lr_sign():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState.for_params({"p": p})
    g = np.array([0.3, -0.5])
    adam_step({"p": p}, {"p": g}, state, lr=0.01)
    # bias-corrected first step is ~lr * sign(g) (EPS makes it slightly less)
    np.testing.assert_allclose(p.data, [1.0 - 0.01, -2.0 + 0.01], atol=1e-6)


def test_ten_steps_match_reference():
    rng = np.random.default_rng(0)
    init = rng.standard_normal(6)
    grads = [rng.standard_normal(6) for _ in range(10)]
    p = Tensor(init.copy(), requires_grad=True)
    state = AdamState.for_params({"p": p})
    for g in grads:
        adam_step({"p": p}, {"p": g}, state, lr=0.003)
    np.testing.assert_allclose(p.data, hand_adam(init, grads, 0.003), atol=1e-12)
    assert state.t == 10


def test_multiple_params_updated_independently():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    state = AdamState.for_params({"a": a, "b": b})
    adam_step({"a": a, "b": b}, {"a": np.ones(2), "b": np.zeros(3)}, state, lr=0.1)
    assert np.abs(a.data).max() > 0
    np.testing.assert_array_equal(b.data, 0.0)


def test_nonfinite_gradient_raises_with_name():
    p = Tensor(np.zeros(2), requires_grad=True)
    state = AdamState.for_params({"p": p})
    with pytest.raises(NonFiniteError) as e:
        adam_step({"p": p}, {"p": np.array([1.0, np.nan])}, state, lr=0.1)
    assert "p" in str(e.value)


def test_lr_schedule_shape():
    peak, warmup = 1e-3, 100
    assert lr_schedule(0, peak, warmup) == 0.0
    assert lr_schedule(50, peak, warmup) == pytest.approx(peak * 0.5)
    assert lr_schedule(100, peak, warmup) == pytest.approx(peak)
    assert lr_schedule(400, peak, warmup) == pytest.approx(peak * 0.5)  # sqrt decay
    # monotonic up then down
    ramp = [lr_schedule(s, peak, warmup) for s in range(1, 101)]
    assert all(x < y for x, y in zip(ramp, ramp[1:]))
    decay = [lr_schedule(s, peak, warmup) for s in range(100, 1000, 50)]
    assert all(x > y for x, y in zip(decay, decay[1:]))


def test_adam_state_checkpoint_fields():
    p = Tensor(np.ones(3), requires_grad=True)
    state = AdamState.for_params({"x": p})
    adam_step({"x": p}, {"x": np.ones(3)}, state, lr=0.01)
    assert set(state.m) == {"x"}
    assert set(state.v) == {"x"}
    assert state.m["x"].shape == (3,)
