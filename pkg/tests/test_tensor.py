"""Reverse-mode engine: primitive values, gradients against central differences, error paths."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from sghmcseg import tensor as T
from sghmcseg.tensor import Graph, GraphError, NonFiniteError, Tensor, evaluate, finite_diff_check

RNG = np.random.default_rng(1234)


def _r(*shape):
    return RNG.standard_normal(shape)


# random output weights: symmetric ones would make some gradients exactly zero,
# where the relative error is dominated by difference round-off
_W_NORM = _r(2, 3, 4, 4)

# one scalar-valued closure per primitive, each evaluated in float64
PRIMITIVE_CASES = {
    "add": ({"a": _r(3, 4), "b": _r(4)}, lambda p: T.sum_(T.square(p["a"] + p["b"]))),
    "mul": ({"a": _r(3, 4), "b": _r(3, 1)}, lambda p: T.sum_(p["a"] * p["b"] * p["a"])),
    "div": ({"a": _r(5), "b": 2.0 + np.abs(_r(5))}, lambda p: T.sum_(p["a"] / p["b"])),
    "neg_sub": ({"a": _r(5), "b": _r(5)}, lambda p: T.sum_(T.square(-p["a"] - p["b"]))),
    "log": ({"a": 0.5 + np.abs(_r(6))}, lambda p: T.sum_(T.log(p["a"]))),
    "clamp": ({"a": _r(8) * 0.5}, lambda p: T.sum_(T.square(T.clamp(p["a"], -0.3, 0.3) + 0.1))),
    "leaky_relu": ({"a": _r(10)}, lambda p: T.sum_(T.square(T.leaky_relu(p["a"], 0.1)))),
    "mean": ({"a": _r(3, 4)}, lambda p: T.square(T.mean(p["a"]))),
    "sum_axis": ({"a": _r(3, 4)}, lambda p: T.sum_(T.square(T.sum_(p["a"], axis=1)))),
    "reshape": ({"a": _r(2, 6)}, lambda p: T.sum_(T.reshape(p["a"], (3, 4)) * np.arange(12.0).reshape(3, 4))),
    "getitem": ({"a": _r(4, 5)}, lambda p: T.sum_(T.square(p["a"][1:3, ::2]))),
    "concat": ({"a": _r(2, 3), "b": _r(2, 2)},
               lambda p: T.sum_(T.square(T.concat([p["a"], p["b"]], axis=1)) * np.arange(10.0).reshape(2, 5))),
    "matmul": ({"a": _r(3, 4), "b": _r(4, 2)}, lambda p: T.sum_(T.square(p["a"] @ p["b"]))),
    "softmax": ({"a": _r(2, 3, 2, 2)}, lambda p: T.sum_(T.softmax(p["a"], axis=1) * np.arange(24.0).reshape(2, 3, 2, 2))),
    "conv2d": ({"x": _r(2, 3, 5, 5), "w": _r(4, 3, 3, 3), "b": _r(4)},
               lambda p: T.sum_(T.square(T.conv2d(p["x"], p["w"], p["b"], padding=1)))),
    "conv2d_narrow": ({"x": _r(1, 4, 4, 4), "w": _r(2, 4, 3, 3)},
                      lambda p: T.sum_(T.square(T.conv2d(p["x"], p["w"], None, padding=1)))),
    "conv2d_1x1": ({"x": _r(2, 3, 4, 4), "w": _r(2, 3, 1, 1)},
                   lambda p: T.sum_(T.square(T.conv2d(p["x"], p["w"])))),
    "max_pool": ({"x": _r(2, 2, 4, 4)}, lambda p: T.sum_(T.square(T.max_pool2x2(p["x"])))),
    "upsample": ({"x": _r(1, 2, 2, 3)}, lambda p: T.sum_(T.upsample2x(p["x"]) * np.arange(48.0).reshape(1, 2, 4, 6))),
    "instance_norm": ({"x": _r(2, 3, 4, 4), "g": _r(3), "b": _r(3)},
                      lambda p: T.sum_(T.instance_norm(p["x"], p["g"], p["b"]) * _W_NORM)),
}


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
    def test_matches_central_differences(self, name):
        point, fn = PRIMITIVE_CASES[name]
        err = finite_diff_check(fn, point, eps=1e-6)
        assert err < 1e-4, f"{name}: max relative error {err:.3g}"

    def test_dropout_gradient_with_fixed_mask(self):
        x = _r(4, 5)

        def fn(p):
            return T.sum_(T.square(T.dropout(p["x"], 0.3, np.random.default_rng(7))))

        assert finite_diff_check(fn, {"x": x}) < 1e-4

    def test_shared_subexpression_accumulates(self):
        a = Tensor(np.array([3.0]), requires_grad=True)
        y = a * a + a                       # dy/da = 2a + 1
        grads = T.backward(T.sum_(y), {"a": a})
        np.testing.assert_allclose(grads["a"], [7.0])


class TestPrimitiveValues:
    def test_conv2d_matches_scipy_correlation(self):
        x = _r(2, 3, 6, 5)
        w = _r(4, 3, 3, 3)
        out = T.conv2d(Tensor(x), Tensor(w), padding=1).data
        ref = np.zeros_like(out)
        for n in range(2):
            for o in range(4):
                ref[n, o] = sum(signal.correlate2d(np.pad(x[n, c], 1), w[o, c], mode="valid") for c in range(3))
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_max_pool_and_upsample(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(T.max_pool2x2(Tensor(x)).data[0, 0], [[5, 7], [13, 15]])
        up = T.upsample2x(Tensor(np.array([[[[1.0, 2.0]]]]))).data
        np.testing.assert_array_equal(up[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])

    def test_instance_norm_moments(self):
        x = _r(2, 3, 8, 8) * 4 + 1
        y = T.instance_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        np.testing.assert_allclose(y.mean(axis=(2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(2, 3)), 1.0, rtol=1e-4)

    def test_softmax_is_a_distribution(self):
        s = T.softmax(Tensor(_r(3, 4, 2, 2) * 30)).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=1e-12)
        assert np.all(s >= 0)

    def test_dropout_keeps_expectation(self):
        x = np.ones((200, 200))
        y = T.dropout(Tensor(x), 0.25, np.random.default_rng(0)).data
        assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}
        assert abs(y.mean() - 1.0) < 0.02

    def test_dropout_inactive_is_identity(self):
        t = Tensor(_r(3))
        assert T.dropout(t, 0.5, None, active=False) is t
        assert T.dropout(t, 0.0, None) is t

    def test_float64_graph_stays_float64(self):
        a = Tensor(_r(3), requires_grad=True)
        out = T.sum_(T.softmax(T.reshape(a, (1, 3)), axis=1) * 2.0)
        assert out.data.dtype == np.float64


class TestGraphAPI:
    def test_evaluate_named_outputs(self):
        g = Graph(lambda p: {"y": p["a"] * 2.0}, ["a"])
        out = evaluate(g, {"a": np.array([1.0, 2.0])})
        np.testing.assert_array_equal(out["y"].data, [2.0, 4.0])

    def test_unbound_input(self):
        g = Graph(lambda p: p["a"] + p["b"], ["a", "b"])
        with pytest.raises(KeyError, match="b"):
            evaluate(g, {"a": np.ones(2)})

    def test_backward_needs_scalar(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            T.backward(a * 2.0, {"a": a})

    def test_backward_needs_a_tensor(self):
        with pytest.raises(GraphError):
            T.backward(np.ones(1))

    def test_unused_parameter_gets_zero_gradient(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        grads = T.backward(T.sum_(a), {"a": a, "b": b})
        np.testing.assert_array_equal(grads["b"], np.zeros(3))

    def test_eps_range(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda p: T.sum_(p["a"]), {"a": np.ones(2)}, eps=1e-9)

    def test_debug_mode_flags_nan(self):
        with T.debug_mode(True), np.errstate(invalid="ignore"):
            with pytest.raises(NonFiniteError):
                T.log(Tensor(np.array([-1.0])))
        # outside the block the same op only warns through numpy
        with np.errstate(invalid="ignore"):
            assert np.isnan(T.log(Tensor(np.array([-1.0]))).data[0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6),
       st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_is_linear_in_the_loss(xs, a, b):
    """grad(a f + b g) = a grad f + b grad g."""
    x = np.array(xs)

    def grad_of(fn):
        t = Tensor(x, requires_grad=True)
        return T.backward(fn(t), {"x": t})["x"]

    f = lambda t: T.sum_(T.square(t))
    g = lambda t: T.sum_(T.leaky_relu(t, 0.2))
    lhs = grad_of(lambda t: f(t) * a + g(t) * b)
    np.testing.assert_allclose(lhs, a * grad_of(f) + b * grad_of(g), rtol=1e-10, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(2, 5))
def test_conv_gradient_random_shapes(cin, cout, size):
    rng = np.random.default_rng(cin * 100 + cout * 10 + size)
    pt = {"x": rng.standard_normal((1, cin, size, size)), "w": rng.standard_normal((cout, cin, 3, 3))}
    err = finite_diff_check(lambda p: T.sum_(T.square(T.conv2d(p["x"], p["w"], padding=1))), pt)
    assert err < 1e-4
