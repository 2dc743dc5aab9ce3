import numpy as np
import pytest

from acvae import autodiff as ad
from acvae.autodiff import Tensor
from acvae.optim import OptimizerState, adam, clip_by_global_norm, optimizer_step, sgd


def test_sgd_single_step():
    p = {"x": Tensor(np.array([1.0]))}
    optimizer_step(p, {"x": np.array([2.0])}, sgd(0.1))
    assert p["x"].value[0] == pytest.approx(0.8)


def test_sgd_weight_decay_is_coupled():
    p = {"x": Tensor(np.array([1.0]))}
    optimizer_step(p, {"x": np.array([0.0])}, sgd(0.1, weight_decay=0.5))
    assert p["x"].value[0] == pytest.approx(1.0 - 0.1 * 0.5)


def test_adam_first_step_closed_form():
    g = np.array([0.3, -2.0, 1e-3])
    p = {"x": Tensor(np.zeros(3))}
    optimizer_step(p, {"x": g}, adam(1e-2))
    np.testing.assert_allclose(p["x"].value, -1e-2 * g / (np.abs(g) + 1e-8), rtol=1e-10)


def test_adam_l2_added_before_moments():
    p = {"x": Tensor(np.array([2.0]))}
    state = adam(1e-3, weight_decay=0.5)
    optimizer_step(p, {"x": np.array([0.0])}, state)
    # effective gradient 0.5 * 2 = 1 -> first step moves by lr
    assert p["x"].value[0] == pytest.approx(2.0 - 1e-3, rel=1e-9)
    assert state.m["x"][0] == pytest.approx(0.1)


def test_sgd_converges_on_quadratic():
    x = Tensor(np.array([1.0]), requires_grad=True)
    state = sgd(0.1)
    for _ in range(200):
        with ad.Tape() as tape:
            tape.backward(ad.sum(ad.mul(x, x)))
        optimizer_step({"x": x}, {"x": x.grad}, state)
    assert abs(x.value[0]) < 1e-9


def test_step_counter_and_moment_shapes():
    p = {"a": Tensor(np.zeros((2, 3))), "b": Tensor(np.zeros(4))}
    state = adam(1e-3)
    for i in range(1, 4):
        optimizer_step(p, {"a": np.ones((2, 3)), "b": np.ones(4)}, state)
        assert state.step == i
    assert state.m["a"].shape == (2, 3) and state.v["b"].shape == (4,)
    s = sgd(1e-3)
    optimizer_step(p, {"a": np.ones((2, 3))}, s)
    assert s.m == {} and s.v == {}


def test_nan_gradient_aborts_naming_parameter():
    p = {"enc.w": Tensor(np.zeros(2))}
    with pytest.raises(FloatingPointError, match="enc.w"):
        optimizer_step(p, {"enc.w": np.array([0.0, np.nan])}, adam(1e-3))
    np.testing.assert_array_equal(p["enc.w"].value, 0.0)


def test_invalid_state():
    with pytest.raises(ValueError):
        OptimizerState("rmsprop", 1e-3)
    with pytest.raises(ValueError):
        sgd(0.0)


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = clip_by_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert np.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0)
    small = {"a": np.array([0.1])}
    clip_by_global_norm(small, 1.0)
    assert small["a"][0] == 0.1
