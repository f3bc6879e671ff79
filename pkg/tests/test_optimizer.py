import numpy as np
import pytest

from teed.architecture import build
from teed.numerics import Tensor
from teed.optimizer import adam_step, init_state, lr_at_epoch
from teed.utils.config import AdamConfig
from teed.utils.errors import ConfigError, ContractError, NonFiniteError


@pytest.fixture
def params():
    return build(seed=0, dtype=np.float64)

def constant_grads(params, value):
    return {n: Tensor(np.full(t.shape, value)) for n, t in params.items()}


def test_schedule():
    assert [lr_at_epoch(e) for e in range(7)] == [8e-4] * 5 + [8e-5] * 2
    assert lr_at_epoch(2, AdamConfig(decay_epoch=1, lr_decayed=1e-3)) == 1e-3
    with pytest.raises(ContractError):
        lr_at_epoch(-1)

def test_init_state(params):
    state = init_state(params)
    assert state.step == 0 and state.lr == 8e-4 and state.weight_decay == 2e-4
    assert set(state.m) == set(params)
    assert all(t.dtype == np.float64 and not t.data.any() for t in state.v.values())

def test_first_step_is_lr_sized(params):
    # with bias correction the first update is lr * sign(g) plus decay
    state = init_state(params, AdamConfig(weight_decay=0.0))
    new, state = adam_step(params, constant_grads(params, 0.3), state)
    name = "block2.conv1.weight"
    np.testing.assert_allclose(new[name].data, params[name].data - 8e-4 * 0.3 / (0.3 + 1e-8), rtol=1e-12)
    assert state.step == 1

def test_decoupled_weight_decay(params):
    state = init_state(params)
    new, _ = adam_step(params, constant_grads(params, 0.0), state)
    name = "usnet3.conv1.weight"
    np.testing.assert_allclose(new[name].data, params[name].data * (1 - 8e-4 * 2e-4), rtol=1e-12)

def test_matches_reference_loop(params, rng):
    name = "skip2.proj.weight"
    theta = params[name].data.copy()
    m = v = np.zeros_like(theta)
    state = init_state(params)
    current = params
    for t in range(1, 6):
        g = rng.standard_normal(theta.shape)
        grads = constant_grads(params, 0.0)
        grads[name] = Tensor(g)
        current, state = adam_step(current, grads, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 8e-4 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8) - 8e-4 * 2e-4 * theta
    np.testing.assert_allclose(current[name].data, theta, rtol=1e-12, atol=1e-15)

def test_float32_storage():
    params = build(seed=1)
    state = init_state(params)
    new, state = adam_step(params, constant_grads(params, 1.0), state)
    assert new.dtype == np.float32
    assert state.m["block1.conv1.weight"].dtype == np.float64

def test_errors(params):
    state = init_state(params)
    grads = constant_grads(params, 1.0)
    del grads["dfuse.dwconv2.bias"]
    with pytest.raises(ContractError):
        adam_step(params, grads, state)
    grads = constant_grads(params, 1.0)
    grads["block1.conv1.bias"] = Tensor(np.ones(3))
    with pytest.raises(ContractError):
        adam_step(params, grads, state)
    with pytest.raises(ConfigError):
        AdamConfig(beta1=1.0).validate()

def test_non_finite_gradient_names_parameter(params):
    class Poisoned:
        data = np.full((16,), np.nan)
        shape = (16,)

    grads = constant_grads(params, 1.0)
    grads["block1.conv1.bias"] = Poisoned()
    with pytest.raises(NonFiniteError) as err:
        adam_step(params, grads, init_state(params))
    assert err.value.where == "block1.conv1.bias"
    assert "conv layer block1.conv1" in str(err.value)
