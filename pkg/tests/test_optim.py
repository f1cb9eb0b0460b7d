import numpy as np
import pytest

from kinediff.optim import AdamW, adamw_step, init_state


def test_zero_grad_zero_decay_leaves_params_unchanged():
    p = np.array([1.0, -2.0], np.float32)
    state = init_state([p], weight_decay=0.0)
    adamw_step([p], [np.zeros_like(p)], state)
    assert np.array_equal(p, np.array([1.0, -2.0], np.float32))
    assert state.step_count == 1


def test_moments_decay_under_zero_gradients():
    p = np.zeros(2, np.float32)
    state = init_state([p], weight_decay=0.0)
    state.m[0][:] = 1.0
    state.v[0][:] = 1.0
    adamw_step([p], [np.zeros_like(p)], state)
    assert np.allclose(state.m[0], 0.9)
    assert np.allclose(state.v[0], 0.999)


def test_constant_gradient_update_approaches_lr():
    p = np.zeros(3, np.float32)
    g = np.array([0.5, -2.0, 10.0], np.float32)
    state = init_state([p], lr=1e-3, weight_decay=0.0)
    prev = p.copy()
    for _ in range(4000):
        adamw_step([p], [g.copy()], state)
        step = prev - p
        prev = p.copy()
    # adaptive-moment limit: update -> lr * sign(g)
    assert np.allclose(step, 1e-3 * np.sign(g), rtol=1e-3)


def test_decoupled_decay_scales_param_per_step():
    p = np.array([2.0], np.float32)
    state = init_state([p], lr=0.01, weight_decay=0.1)
    for expected_steps in range(1, 6):
        adamw_step([p], [np.zeros_like(p)], state)
        assert np.allclose(p, 2.0 * (1 - 0.01 * 0.1) ** expected_steps, rtol=1e-6)


def test_shape_mismatch_raises():
    p = np.zeros(3, np.float32)
    state = init_state([p])
    with pytest.raises(ValueError):
        adamw_step([p], [np.zeros(4, np.float32)], state)


def test_wrapper_class_applies_grad_dict():
    from kinediff.autodiff import Tensor

    t = Tensor(np.ones(2, np.float32), requires_grad=True)
    opt = AdamW([t], lr=0.1, weight_decay=0.0)
    opt.step({t: np.ones(2, np.float32)})
    assert np.all(t.data < 1.0)
