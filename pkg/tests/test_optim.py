import numpy as np
import pytest

from flowscan.errors import ConfigError, ContractError
from flowscan.optim import ParamStore, adam_step


def test_zero_gradients_leave_values_unchanged():
    store = ParamStore()
    w = store.add("w", np.array([1.0, -2.0]))
    w.grad = np.zeros(2)
    adam_step(store)
    assert np.array_equal(w.data, [1.0, -2.0])


def test_first_step_moves_by_lr():
    store = ParamStore()
    x = store.add("x", np.array(1.0))
    x.grad = np.array(2.0)
    adam_step(store, lr=0.1)
    assert x.data == pytest.approx(0.9, abs=1e-6)


def test_second_identical_step_is_not_larger():
    store = ParamStore()
    x = store.add("x", np.array(1.0))
    x.grad = np.array(2.0)
    adam_step(store, lr=0.1)
    first = 1.0 - float(x.data)
    before = float(x.data)
    x.grad = np.array(2.0)
    adam_step(store, lr=0.1)
    second = before - float(x.data)
    assert second <= first * 1.01


def test_step_clears_gradients_and_counts():
    store = ParamStore()
    x = store.add("x", np.ones(3))
    x.grad = np.ones(3)
    adam_step(store)
    assert x.grad is None
    assert store.step == 1


def test_missing_gradient_names_parameter():
    store = ParamStore()
    store.add("layer.w", np.ones(2))
    with pytest.raises(ContractError, match="layer.w"):
        adam_step(store)


@pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"beta1": 1.0}, {"beta2": -0.1}, {"eps": 0.0}])
def test_invalid_hyperparameters(kwargs):
    store = ParamStore()
    x = store.add("x", np.ones(1))
    x.grad = np.ones(1)
    with pytest.raises(ConfigError):
        adam_step(store, **kwargs)


def test_gradient_clipping_caps_global_norm():
    # with clipping the first Adam step is still lr-sized (Adam normalizes), but
    # the recorded moment reflects the clipped gradient
    store = ParamStore()
    x = store.add("x", np.zeros(4))
    x.grad = np.full(4, 100.0)
    norm = adam_step(store, lr=0.01, clip_norm=10.0)
    assert norm == pytest.approx(200.0)
    assert np.allclose(store.m["x"], 0.1 * np.full(4, 5.0))


def test_duplicate_names_rejected():
    store = ParamStore()
    store.add("a", np.ones(1))
    with pytest.raises(ConfigError):
        store.add("a", np.ones(1))


def test_state_dict_round_trip():
    store = ParamStore()
    store.add("a", np.arange(3.0))
    state = store.state_dict()
    store["a"].data[:] = 0
    store.load_state_dict(state)
    assert np.array_equal(store["a"].data, np.arange(3.0))
