import mlx.core as mx
import mlx.nn as nn
import numpy as np
import pytest

from mlx_handnerf.common.config import OptimizerConfig
from mlx_handnerf.common.errors import NonFiniteError, ShapeMismatchError
from mlx_handnerf.networks import (
    GradientAccumulator,
    Mlp,
    MlpSpec,
    ParameterStore,
    backward,
    init_parameters,
    make_optimizer,
    mlp_forward,
    optimizer_step,
)

F64 = mx.float64


def _store(spec, seed=0):
    return ParameterStore(init_parameters(spec, np.random.default_rng(seed), F64))


class TestForward:
    def test_zero_last_layer_outputs_zero(self, rng):
        spec = MlpSpec(5, (16, 16, 3), init="zero_last")
        out, _ = mlp_forward(spec, _store(spec), mx.array(rng.normal(size=(7, 5)), dtype=F64))
        np.testing.assert_array_equal(np.array(out), 0.0)

    def test_identity_linear_layer(self, rng):
        spec = MlpSpec(3, (3,))
        store = ParameterStore({"layers.0.weight": np.eye(3), "layers.0.bias": np.zeros(3)}, F64)
        x = rng.normal(size=(4, 3))
        out, _ = mlp_forward(spec, store, mx.array(x, dtype=F64))
        np.testing.assert_allclose(np.array(out), x, atol=1e-15)

    def test_deterministic(self, rng):
        spec = MlpSpec(4, (8, 8, 2), skips=(1,))
        store = _store(spec)
        x = mx.array(rng.normal(size=(3, 4)), dtype=F64)
        a, _ = mlp_forward(spec, store, x)
        b, _ = mlp_forward(spec, store, x)
        np.testing.assert_array_equal(np.array(a), np.array(b))

    def test_input_width_checked(self):
        spec = MlpSpec(4, (8, 2))
        with pytest.raises(ShapeMismatchError):
            mlp_forward(spec, _store(spec), mx.zeros((2, 5), dtype=F64))
        with pytest.raises(ShapeMismatchError):
            Mlp(spec, dtype=F64)(mx.zeros((2, 5), dtype=F64))

    def test_module_matches_functional(self, rng):
        spec = MlpSpec(4, (8, 8, 2), skips=(1,))
        module = Mlp(spec, np.random.default_rng(0), F64)
        store = _store(spec, seed=0)
        x = mx.array(rng.normal(size=(3, 4)), dtype=F64)
        np.testing.assert_allclose(np.array(module(x)), np.array(mlp_forward(spec, store, x)[0]), atol=1e-12)

    @pytest.mark.parametrize("kwargs", [dict(widths=()), dict(widths=(0, 3)), dict(widths=(4, 3), skips=(2,))])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ShapeMismatchError):
            MlpSpec(3, **kwargs)


class TestBackward:
    def test_matches_finite_differences(self, rng):
        spec = MlpSpec(3, (5, 2), activation="silu")
        store = _store(spec, seed=1)
        x = mx.array(rng.normal(size=(4, 3)), dtype=F64)
        out, tape = mlp_forward(spec, store, x)
        grads = backward(tape, mx.ones_like(out)).grads

        base = store.to_numpy()
        h = 1e-5
        for name, value in base.items():
            numeric = np.zeros_like(value)
            for idx in np.ndindex(value.shape):
                for sign in (1, -1):
                    bumped = dict(base)
                    bumped[name] = value.copy()
                    bumped[name][idx] += sign * h
                    y, _ = mlp_forward(spec, ParameterStore(bumped, F64), x)
                    numeric[idx] += sign * float(np.array(mx.sum(y)))
            numeric /= 2 * h
            np.testing.assert_allclose(np.array(grads[name]), numeric, rtol=1e-6, atol=1e-9)

    def test_zero_upstream(self, rng):
        spec = MlpSpec(3, (5, 2))
        out, tape = mlp_forward(spec, _store(spec), mx.array(rng.normal(size=(4, 3)), dtype=F64))
        acc = backward(tape, mx.zeros_like(out))
        for g in acc.grads.values():
            np.testing.assert_array_equal(np.array(g), 0.0)

    def test_linear_layer_gradient_is_outer_product(self, rng):
        spec = MlpSpec(3, (2,))
        x = rng.normal(size=3)
        out, tape = mlp_forward(spec, _store(spec), mx.array(x, dtype=F64))
        grads = backward(tape, mx.ones_like(out)).grads
        np.testing.assert_allclose(np.array(grads["layers.0.weight"]), np.outer(np.ones(2), x), atol=1e-15)
        np.testing.assert_allclose(np.array(grads["layers.0.bias"]), np.ones(2), atol=1e-15)

    def test_repeated_calls_accumulate(self, rng):
        spec = MlpSpec(3, (5, 2))
        out, tape = mlp_forward(spec, _store(spec), mx.array(rng.normal(size=(4, 3)), dtype=F64))
        up = mx.array(rng.normal(size=(4, 2)), dtype=F64)
        once = backward(tape, up).grads
        acc = GradientAccumulator()
        backward(tape, up, acc)
        backward(tape, up, acc)
        for name in once:
            np.testing.assert_array_equal(np.array(acc.grads[name]), 2 * np.array(once[name]))

    def test_accumulation_is_linear(self, rng):
        spec = MlpSpec(3, (5, 2))
        out, tape = mlp_forward(spec, _store(spec), mx.array(rng.normal(size=(4, 3)), dtype=F64))
        a = mx.array(rng.normal(size=(4, 2)), dtype=F64)
        b = mx.array(rng.normal(size=(4, 2)), dtype=F64)
        acc = GradientAccumulator()
        backward(tape, a, acc)
        backward(tape, b, acc)
        joint = backward(tape, a + b).grads
        for name in joint:
            np.testing.assert_allclose(np.array(acc.grads[name]), np.array(joint[name]), atol=1e-10)

    def test_upstream_shape_checked(self, rng):
        spec = MlpSpec(3, (2,))
        _, tape = mlp_forward(spec, _store(spec), mx.array(rng.normal(size=(4, 3)), dtype=F64))
        with pytest.raises(ShapeMismatchError):
            backward(tape, mx.ones((4, 3), dtype=F64))


class TestParameterStore:
    def test_shapes_fixed(self):
        store = ParameterStore({"w": np.zeros((2, 3))}, F64)
        with pytest.raises(ShapeMismatchError):
            store.assign({"w": mx.zeros((3, 2), dtype=F64)})
        with pytest.raises(ShapeMismatchError):
            store.assign({"v": mx.zeros((2, 3), dtype=F64)})

    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            ParameterStore({"w": np.array([1.0, np.nan])}, F64)


def _quadratic(store):
    return mx.sum((store["theta"] - 3.0) ** 2)


class TestOptimizer:
    def _step(self, store, grads, config, steps=1):
        opt = make_optimizer(config, steps)
        optimizer_step(store, grads, opt)
        mx.eval(store.parameters())

    def test_zero_gradient_leaves_parameters(self):
        store = ParameterStore({"theta": np.array([0.5, -1.0])}, F64)
        before = store.to_numpy()["theta"]
        self._step(store, {"theta": mx.zeros((2,), dtype=F64)}, OptimizerConfig())
        np.testing.assert_array_equal(store.to_numpy()["theta"], before)

    def test_zero_learning_rate_leaves_parameters(self):
        store = ParameterStore({"theta": np.array([0.5, -1.0])}, F64)
        before = store.to_numpy()["theta"]
        self._step(store, {"theta": mx.ones((2,), dtype=F64)}, OptimizerConfig(learning_rate=0.0))
        np.testing.assert_array_equal(store.to_numpy()["theta"], before)

    def test_non_finite_gradient_rejected(self):
        store = ParameterStore({"theta": np.array([0.5, -1.0])}, F64)
        before = store.to_numpy()["theta"]
        with pytest.raises(NonFiniteError) as info:
            self._step(store, {"theta": mx.array([np.inf, 0.0], dtype=F64)}, OptimizerConfig())
        assert info.value.diagnostics == {"theta": 1}
        np.testing.assert_array_equal(store.to_numpy()["theta"], before)

    def test_converges_on_quadratic(self):
        store = ParameterStore({"theta": np.zeros(1)}, F64)
        config = OptimizerConfig(learning_rate=0.1, final_learning_rate=1e-4)
        opt = make_optimizer(config, 500)
        loss_and_grad = nn.value_and_grad(store, _quadratic)
        for _ in range(500):
            _, grads = loss_and_grad(store)
            optimizer_step(store, grads, opt)
            mx.eval(store.parameters(), opt.state)
        assert abs(store.to_numpy()["theta"][0] - 3.0) < 1e-3
