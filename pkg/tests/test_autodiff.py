"""Reverse-mode gradients against independent oracles, plus optimizer checks."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from igpo import autodiff as ad
from igpo.errors import ConfigError, NumericalError, ShapeError
from igpo.optim import (
    OptimizerState,
    ScheduleConfig,
    adam_update,
    init_optimizer_state,
    lr_schedule,
)
from igpo.rngs import derive_rng


def test_square_value_and_gradient():
    val, g = ad.evaluate_and_backprop(
        lambda p: ad.tsum(ad.mul(p["x"], p["x"])), {"x": np.array([3.0])}
    )
    assert val == 9.0
    assert g["x"][0] == 6.0


def test_softmax_cross_entropy_two_class():
    # logits [0,0] against class 0: loss ln 2, gradient softmax - onehot
    def loss(p):
        return ad.mul(ad.take_along_last(ad.log_softmax(p["z"]), np.array(0)), -1.0)

    val, g = ad.evaluate_and_backprop(loss, {"z": np.zeros(2)})
    assert abs(val - math.log(2)) < 1e-15
    np.testing.assert_allclose(g["z"], [-0.5, 0.5], atol=1e-15)


def _mlp_loss(leaves):
    x = np.linspace(-1.0, 1.0, 12).reshape(3, 4)
    targets = np.array([0, 2, 1])
    h = ad.tanh(ad.add(ad.matmul(ad.as_tensor(x), leaves["w1"]), leaves["b1"]))
    logits = ad.add(ad.matmul(h, leaves["w2"]), leaves["b2"])
    return ad.mul(ad.tmean(ad.take_along_last(ad.log_softmax(logits), targets)), -1.0)


def test_two_layer_network_matches_finite_differences():
    rng = derive_rng("mlp-gradcheck")
    params = {
        "w1": rng.normal(0, 0.5, (4, 8)),
        "b1": np.zeros(8),
        "w2": rng.normal(0, 0.5, (8, 4)),
        "b2": np.zeros(4),
    }
    assert sum(p.size for p in params.values()) <= 200
    _, analytic = ad.evaluate_and_backprop(_mlp_loss, params)

    def f(p):
        with ad.no_grad():
            return _mlp_loss(ad.lift(p)).item()

    numeric = ad.finite_difference_gradient(f, params, epsilon=1e-4)
    assert ad.max_relative_error(analytic, numeric) < 1e-5


def test_finite_difference_square():
    fd = ad.finite_difference_gradient(
        lambda p: float((p["x"] * p["x"]).sum()), {"x": np.array([3.0])}, epsilon=1e-4
    )
    assert abs(fd["x"][0] - 6.0) < 1e-7


def test_finite_difference_constant_function():
    fd = ad.finite_difference_gradient(lambda p: 5.0, {"x": np.arange(4.0)})
    assert np.all(fd["x"] == 0.0)


def test_finite_difference_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        ad.finite_difference_gradient(lambda p: 0.0, {"x": np.zeros(1)}, epsilon=0.0)


def test_repeated_calls_bit_identical():
    params = {"w": derive_rng("det").normal(size=(5, 5))}

    def loss(p):
        return ad.tsum(ad.tanh(ad.matmul(p["w"], p["w"])))

    v1, g1 = ad.evaluate_and_backprop(loss, params)
    v2, g2 = ad.evaluate_and_backprop(loss, params)
    assert v1 == v2
    assert np.array_equal(g1["w"], g2["w"])


def test_unused_parameter_gets_exact_zero_gradient():
    params = {"used": np.ones(3), "unused": np.ones(4)}
    _, g = ad.evaluate_and_backprop(lambda p: ad.tsum(p["used"]), params)
    assert np.all(g["unused"] == 0.0)
    # embedding rows never looked up must also stay exactly zero
    table = {"emb": derive_rng("emb").normal(size=(6, 3))}
    _, g = ad.evaluate_and_backprop(
        lambda p: ad.tsum(ad.embedding(p["emb"], np.array([1, 1, 4]))), table
    )
    assert np.all(g["emb"][[0, 2, 3, 5]] == 0.0)
    assert np.all(g["emb"][1] == 2.0)


def test_nonscalar_root_is_shape_error():
    with pytest.raises(ShapeError):
        ad.evaluate_and_backprop(lambda p: ad.mul(p["x"], 2.0), {"x": np.ones(3)})


def test_nan_during_forward_names_the_op():
    with pytest.raises(NumericalError, match="log"):
        ad.evaluate_and_backprop(lambda p: ad.tsum(ad.log(p["x"])), {"x": np.array([-1.0])})


PRIMITIVES = [
    ("add_broadcast", lambda p: ad.add(p["a"], p["b"][0:1])),
    ("sub", lambda p: ad.sub(p["a"], p["b"])),
    ("mul_broadcast", lambda p: ad.mul(p["a"], p["b"][0:1])),
    ("div", lambda p: ad.div(p["a"], ad.add(ad.mul(p["b"], p["b"]), 1.0))),
    ("pow", lambda p: ad.power(ad.add(ad.mul(p["a"], p["a"]), 0.5), 1.5)),
    ("exp", lambda p: ad.exp(p["a"])),
    ("log", lambda p: ad.log(ad.add(ad.mul(p["a"], p["a"]), 0.5))),
    ("tanh", lambda p: ad.tanh(p["a"])),
    ("gelu", lambda p: ad.gelu(p["a"])),
    ("softmax", lambda p: ad.softmax(p["a"])),
    ("log_softmax", lambda p: ad.log_softmax(p["a"])),
    ("matmul", lambda p: ad.matmul(p["a"], p["b"].swapaxes(0, 1))),
    ("layer_norm", lambda p: ad.layer_norm(p["a"], p["g"], p["c"])),
    ("minimum", lambda p: ad.minimum(p["a"], p["b"])),
    ("clip", lambda p: ad.clip(p["a"], -0.5, 0.5)),
    ("sum_axis", lambda p: ad.tsum(p["a"], axis=0, keepdims=True)),
    ("mean_axis", lambda p: ad.tmean(p["a"], axis=1)),
    ("swapaxes", lambda p: ad.matmul(ad.swapaxes(p["a"], 0, 1), p["a"])),
    ("expand", lambda p: ad.expand(p["a"][0:1], (4, 5))),
    ("getitem", lambda p: p["a"][1:3, ::2]),
    ("take_along_last", lambda p: ad.take_along_last(p["a"], np.array([0, 4, 2, 1]))),
]


@pytest.mark.parametrize("name,fn", PRIMITIVES, ids=[n for n, _ in PRIMITIVES])
def test_primitive_gradients_match_finite_differences(name, fn):
    rng = derive_rng("prim", name)
    params = {
        "a": rng.normal(0, 0.8, (4, 5)),
        "b": rng.normal(0, 0.8, (4, 5)),
        "g": rng.normal(1.0, 0.1, 5),
        "c": rng.normal(0, 0.1, 5),
    }
    proj = rng.normal(size=())  # fixed scalar weight keeps the root scalar

    def loss(leaves):
        out = fn(leaves)
        return ad.mul(ad.tsum(ad.mul(out, out)), float(proj))

    _, analytic = ad.evaluate_and_backprop(loss, params)

    def f(p):
        with ad.no_grad():
            return loss(ad.lift(p)).item()

    numeric = ad.finite_difference_gradient(f, params, epsilon=1e-4)
    assert ad.max_relative_error(analytic, numeric) < 1e-4, name


def test_minimum_tie_routes_gradient_to_first_operand():
    params = {"a": np.array([1.0]), "b": np.array([1.0])}
    _, g = ad.evaluate_and_backprop(lambda p: ad.tsum(ad.minimum(p["a"], p["b"])), params)
    assert g["a"][0] == 1.0 and g["b"][0] == 0.0


def test_clip_blocks_gradient_outside_range():
    params = {"a": np.array([-2.0, 0.0, 2.0])}
    _, g = ad.evaluate_and_backprop(lambda p: ad.tsum(ad.clip(p["a"], -1.0, 1.0)), params)
    np.testing.assert_array_equal(g["a"], [0.0, 1.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_embedding_scatter_matches_dense_recompute(seed):
    rng = derive_rng("embh", seed)
    table = rng.normal(size=(7, 3))
    ids = rng.integers(0, 7, size=(4,))
    weights = rng.normal(size=(4, 3))

    _, g = ad.evaluate_and_backprop(
        lambda p: ad.tsum(ad.mul(ad.embedding(p["t"], ids), weights)), {"t": table}
    )
    dense = np.zeros_like(table)
    for row, w in zip(ids, weights):
        dense[row] += w
    np.testing.assert_allclose(g["t"], dense, atol=1e-14)


# -- optimizer ----------------------------------------------------------------


def test_adam_lr_zero_is_identity():
    params = {"w": np.array([1.0, -2.0])}
    before = params["w"].copy()
    state = init_optimizer_state(params)
    adam_update(params, {"w": np.array([0.3, -0.7])}, state, lr=0.0)
    assert np.array_equal(params["w"], before)
    assert state.step == 1


def test_adam_first_step_close_to_lr():
    params = {"w": np.array([5.0])}
    state = init_optimizer_state(params)
    adam_update(params, {"w": np.array([1.0])}, state, lr=0.1)
    assert abs(params["w"][0] - 4.9) < 1e-6  # bias-corrected first step = lr * sign(g)


def test_adam_converges_on_quadratic():
    params = {"x": np.array([5.0])}
    state = init_optimizer_state(params)
    for _ in range(100):
        adam_update(params, {"x": 2.0 * params["x"]}, state, lr=0.1)
    assert abs(params["x"][0]) < 0.5


def test_adam_shape_mismatch_is_config_error():
    params = {"w": np.zeros(3)}
    with pytest.raises(ConfigError):
        adam_update(params, {"w": np.zeros(4)}, init_optimizer_state(params), lr=0.1)


def test_adam_weight_decay_decoupled():
    params = {"w": np.array([1.0])}
    state = init_optimizer_state(params)
    adam_update(params, {"w": np.array([0.0])}, state, lr=0.1, weight_decay=0.5)
    # zero gradient: only the decay term moves the parameter
    assert abs(params["w"][0] - (1.0 - 0.1 * 0.5)) < 1e-12


# -- schedules ----------------------------------------------------------------


def test_sft_schedule_shape():
    cfg = ScheduleConfig(mode="sft", peak_lr=1.0, total_steps=1000, warmup_steps=200,
                         min_lr=0.1, decay_frac=0.1)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(1, cfg) == pytest.approx(1.0 / 200)
    assert lr_schedule(200, cfg) == 1.0
    assert lr_schedule(900, cfg) == 1.0  # stable until the final decay fraction
    assert lr_schedule(1000, cfg) == pytest.approx(0.1)
    assert lr_schedule(950, cfg) == pytest.approx(0.55)


def test_rl_schedule_decays_to_zero():
    cfg = ScheduleConfig(mode="rl", peak_lr=2.0, total_steps=100, warmup_steps=10)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(10, cfg) == 2.0
    assert lr_schedule(100, cfg) == 0.0
    assert lr_schedule(55, cfg) == pytest.approx(1.0)


def test_schedule_rejects_horizon_shorter_than_warmup():
    with pytest.raises(ConfigError):
        ScheduleConfig(mode="rl", peak_lr=1.0, total_steps=5, warmup_steps=10)
