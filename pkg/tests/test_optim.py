import numpy as np
import pytest

from evomoe import numerics as nx
from evomoe.config import OptimConfig
from evomoe.errors import NonFiniteError, ShapeError
from evomoe.optim import AdamState, adam_step, global_norm, lr_at


def test_lr_warmup_and_decay():
    optim = OptimConfig(lr=1e-3, warmup_iters=10)
    assert lr_at(optim, 0, 110) == pytest.approx(1e-4)
    assert lr_at(optim, 9, 110) == pytest.approx(1e-3)
    assert lr_at(optim, 60, 110) == pytest.approx(5e-4)
    assert lr_at(optim, 110, 110) == 0.0 and lr_at(optim, 500, 110) == 0.0
    assert lr_at(OptimConfig(lr=1e-3, warmup_iters=0), 0, 100) == pytest.approx(1e-3)


def test_first_adam_step_moves_by_lr_times_sign():
    params = {"w": nx.parameter([1.0, -2.0, 3.0])}
    state = adam_step(params, {"w": np.array([0.5, -4.0, 0.0])}, AdamState(), lr=0.1, eps=1e-12, weight_decay=0.0)
    np.testing.assert_allclose(params["w"].data, [0.9, -1.9, 3.0], atol=1e-9)
    assert state.step == 1 and set(state.m) == {"w"}


def test_decoupled_weight_decay_without_gradient():
    params = {"w": nx.parameter([2.0, -1.0])}
    adam_step(params, {}, AdamState(), lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(params["w"].data, [1.9, -0.95])


def test_clipping_scales_gradients():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert global_norm(grads) == 5.0
    clipped, unclipped = AdamState(), AdamState()
    adam_step({"a": nx.parameter([0.0]), "b": nx.parameter([0.0])}, grads, clipped, lr=0.1, clip_norm=1.0)
    adam_step({"a": nx.parameter([0.0]), "b": nx.parameter([0.0])}, grads, unclipped, lr=0.1)
    np.testing.assert_allclose(clipped.m["a"], unclipped.m["a"] / 5.0)


def test_non_finite_update_leaves_parameters_untouched():
    params = {"a": nx.parameter([1.0]), "b": nx.parameter([2.0])}
    state = AdamState()
    with pytest.raises(NonFiniteError):
        adam_step(params, {"a": np.array([0.1]), "b": np.array([np.inf])}, state, lr=0.1)
    assert params["a"].data[0] == 1.0 and params["b"].data[0] == 2.0
    assert state.step == 0 and not state.m
    with pytest.raises(ShapeError):
        adam_step(params, {"a": np.zeros(2)}, state, lr=0.1)


def test_drop_forgets_moments():
    state = AdamState(m={"x": 1.0, "y": 2.0}, v={"x": 1.0, "y": 2.0})
    state.drop(["x", "z"])
    assert set(state.m) == set(state.v) == {"y"}


def test_one_step_on_a_square_matches_hand_unrolled_adam():
    x = {"x": nx.parameter([1.0])}
    adam_step(x, {"x": np.array([2.0])}, AdamState(), lr=1e-3, weight_decay=0.0)
    m_hat = (0.1 * 2.0) / 0.1
    v_hat = (0.02 * 4.0) / 0.02
    expected = 1.0 - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert abs(x["x"].data[0] - expected) < 1e-12


def test_zero_gradients_without_decay_change_nothing():
    params = {"w": nx.parameter([0.25, -3.0])}
    adam_step(params, {"w": np.zeros(2)}, AdamState(), lr=1e-3, weight_decay=0.0)
    np.testing.assert_array_equal(params["w"].data, [0.25, -3.0])
    adam_step(params, {}, AdamState(), lr=1e-3, weight_decay=0.1)
    np.testing.assert_allclose(params["w"].data, np.array([0.25, -3.0]) * (1 - 1e-4), rtol=1e-15)


def test_parameters_added_mid_run_take_a_first_adam_step():
    """After diversify-style replacement, a new tensor's first update is lr * sign(g), not a late-step fraction."""
    params = {"old": nx.parameter([1.0])}
    state = AdamState()
    for _ in range(500):
        adam_step(params, {"old": np.array([0.3])}, state, lr=1e-3, weight_decay=0.0)
    state.drop(["old"])
    assert "old" not in state.counts
    params = {"new": nx.parameter([0.0, 0.0])}
    adam_step(params, {"new": np.array([2.0, -0.01])}, state, lr=1e-3, eps=1e-12, weight_decay=0.0)
    np.testing.assert_allclose(params["new"].data, [-1e-3, 1e-3], rtol=1e-9)
    assert state.counts == {"new": 1} and state.step == 501
