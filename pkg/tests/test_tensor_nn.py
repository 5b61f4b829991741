import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nca_sensing.tensor_nn import (
    AdamState,
    ConvParams,
    NonFiniteGradientError,
    ShapeError,
    adam_step,
    conv2d_backward,
    conv2d_forward,
    grad_check,
    relu,
    relu_backward,
    sobel_backward,
    sobel_depthwise,
    sobel_kernel_bank,
)

from conftest import central_diff, direct_conv, rel_err


def random_conv(rng, out_ch, in_ch, k):
    return ConvParams(rng.normal(size=(out_ch, in_ch, k, k)), rng.normal(size=out_ch))


class TestConvForward:
    def test_identity_1x1(self, rng):
        x = rng.normal(size=(1, 5, 6))
        out = conv2d_forward(x, ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1)))
        np.testing.assert_array_equal(out, x)

    def test_all_ones_kernel_on_constant(self):
        v = 2.5
        out = conv2d_forward(np.full((1, 4, 4), v), ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1)))
        assert out[0, 1, 1] == pytest.approx(9 * v)
        assert out[0, 0, 0] == pytest.approx(4 * v)
        assert out[0, 0, 2] == pytest.approx(6 * v)

    def test_matches_direct_summation(self, rng):
        x = rng.normal(size=(2, 5, 5))
        params = random_conv(rng, 4, 2, 3)
        np.testing.assert_allclose(conv2d_forward(x, params), direct_conv(x, params.kernel, params.bias), rtol=0, atol=1e-12)

    def test_direct_summation_100_cases(self, rng):
        worst = 0.0
        for _ in range(100):
            k = int(rng.choice([1, 3]))
            c_in, c_out = rng.integers(1, 4, size=2)
            h, w = rng.integers(1, 7, size=2)
            x = rng.normal(size=(c_in, h, w))
            params = random_conv(rng, c_out, c_in, k)
            worst = max(worst, np.abs(conv2d_forward(x, params) - direct_conv(x, params.kernel, params.bias)).max())
        assert worst <= 1e-12

    def test_batched_equals_unbatched(self, rng):
        x = rng.normal(size=(3, 2, 4, 5))
        params = random_conv(rng, 3, 2, 3)
        batched = conv2d_forward(x, params)
        for i in range(3):
            np.testing.assert_allclose(batched[i], conv2d_forward(x[i], params), atol=1e-14)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError) as err:
            conv2d_forward(rng.normal(size=(3, 4, 4)), random_conv(rng, 2, 2, 3))
        assert err.value.expected == 2 and err.value.actual == 3

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]))
    def test_same_padding_shape(self, h, w, k):
        params = ConvParams.zeros(2, 1, k)
        assert conv2d_forward(np.zeros((1, h, w)), params).shape == (2, h, w)

    def test_rejects_even_kernel(self):
        with pytest.raises(ShapeError):
            ConvParams(np.zeros((1, 1, 2, 2)), np.zeros(1))


class TestConvBackward:
    def test_zero_grad_out(self, rng):
        x = rng.normal(size=(2, 4, 4))
        params = random_conv(rng, 3, 2, 3)
        gi, gk, gb = conv2d_backward(np.zeros((3, 4, 4)), x, params)
        assert not gi.any() and not gk.any() and not gb.any()

    def test_identity_kernel_passes_gradient(self, rng):
        g = rng.normal(size=(1, 3, 3))
        gi, _, _ = conv2d_backward(g, rng.normal(size=(1, 3, 3)), ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1)))
        np.testing.assert_array_equal(gi, g)

    @pytest.mark.parametrize("k", [1, 3])
    def test_finite_differences(self, rng, k):
        x = rng.normal(size=(2, 4, 5))
        params = random_conv(rng, 3, 2, k)
        weights = rng.normal(size=(3, 4, 5))

        def loss():
            return float((weights * conv2d_forward(x, params)).sum())

        gi, gk, gb = conv2d_backward(weights, x, params)
        for arr, grad in ((x, gi), (params.kernel, gk), (params.bias, gb)):
            for flat in rng.choice(arr.size, size=min(arr.size, 20), replace=False):
                idx = np.unravel_index(flat, arr.shape)
                assert rel_err(grad[idx], central_diff(loss, arr, idx)) <= 1e-4

    def test_shape_mismatch(self, rng):
        params = random_conv(rng, 3, 2, 3)
        with pytest.raises(ShapeError):
            conv2d_backward(np.zeros((2, 4, 4)), np.zeros((2, 4, 4)), params)


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_positive_is_identity(self, rng):
        x = rng.uniform(0.1, 2.0, size=(2, 3, 3))
        g = rng.normal(size=x.shape)
        np.testing.assert_array_equal(relu(x), x)
        np.testing.assert_array_equal(relu_backward(g, x), g)

    def test_zero_subgradient(self):
        assert relu_backward(np.array([1.0]), np.array([0.0]))[0] == 0.0

    def test_finite_differences_away_from_kink(self, rng):
        x = rng.normal(size=50)
        x[np.abs(x) < 1e-3] = 0.5
        w = rng.normal(size=50)
        g = relu_backward(w, x)
        for i in range(50):
            assert rel_err(g[i], central_diff(lambda: float((w * relu(x)).sum()), x, i)) <= 1e-4


class TestSobel:
    def test_constant_field_is_zero_away_from_border(self):
        out = sobel_depthwise(np.full((2, 5, 5), 3.0))
        assert not out[:, 1:-1, 1:-1].any()

    def test_zero_field_is_exactly_zero(self):
        assert not sobel_depthwise(np.zeros((3, 4, 4))).any()

    def test_ramp(self):
        x = np.tile(np.arange(6.0), (6, 1))[None]
        out = sobel_depthwise(x)
        np.testing.assert_array_equal(out[0, 1:-1, 1:-1], 8.0)
        np.testing.assert_array_equal(out[1, 1:-1, 1:-1], 0.0)

    def test_matches_dense_conv(self, rng):
        x = rng.normal(size=(3, 5, 6))
        np.testing.assert_allclose(sobel_depthwise(x), conv2d_forward(x, sobel_kernel_bank(3)), atol=1e-12)

    def test_channel_order(self, rng):
        x = rng.normal(size=(2, 4, 4))
        out = sobel_depthwise(x)
        np.testing.assert_allclose(out[2], sobel_depthwise(x[1:2])[0])
        np.testing.assert_allclose(out[3], sobel_depthwise(x[1:2])[1])

    def test_backward_matches_conv_backward(self, rng):
        x = rng.normal(size=(2, 4, 5))
        g = rng.normal(size=(4, 4, 5))
        gi, _, _ = conv2d_backward(g, x, sobel_kernel_bank(2))
        np.testing.assert_allclose(sobel_backward(g), gi, atol=1e-12)


class TestAdam:
    def test_zero_gradients_are_noop(self, rng):
        p = {"w": rng.normal(size=(3, 3))}
        before = p["w"].copy()
        st_ = AdamState.for_params(p)
        for _ in range(25):
            adam_step(p, {"w": np.zeros((3, 3))}, st_)
        np.testing.assert_array_equal(p["w"], before)
        assert not st_.m["w"].any() and st_.t == 25

    def test_first_step_magnitude(self):
        p = {"w": np.array([1.0])}
        st_ = AdamState.for_params(p, lr=0.01)
        adam_step(p, {"w": np.array([-3.0])}, st_)
        assert p["w"][0] - 1.0 == pytest.approx(0.01 * 3.0 / (3.0 + 1e-8))

    def test_minimizes_quadratic(self):
        p = {"w": np.array([1.0])}
        st_ = AdamState.for_params(p, lr=0.1)
        for _ in range(200):
            adam_step(p, {"w": 2 * p["w"]}, st_)
        assert abs(p["w"][0]) < 1e-2

    def test_non_finite_gradient_names_block(self):
        p = {"a": np.zeros(2), "b": np.zeros(2)}
        with pytest.raises(NonFiniteGradientError) as err:
            adam_step(p, {"a": np.zeros(2), "b": np.array([0.0, np.nan])}, AdamState.for_params(p))
        assert err.value.name == "b"

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (4,), elements=st.floats(-5, 5)), st.integers(1, 20))
    def test_zero_gradient_noop_property(self, start, steps):
        p = {"w": start.copy()}
        st_ = AdamState.for_params(p)
        for _ in range(steps):
            adam_step(p, {"w": np.zeros(4)}, st_)
        np.testing.assert_array_equal(p["w"], start)


class TestGradCheck:
    def test_linear_loss(self, rng):
        params = {"w": rng.normal(size=10)}
        assert grad_check(lambda p: (float(p["w"].sum()), {"w": np.ones(10)}), params) <= 1e-8

    def test_conv_relu_conv_stack(self, rng):
        x = rng.normal(size=(2, 5, 5))
        c1, c2 = random_conv(rng, 4, 2, 3), random_conv(rng, 2, 4, 1)
        target = rng.normal(size=(2, 5, 5))
        params = {"k1": c1.kernel, "b1": c1.bias, "k2": c2.kernel, "b2": c2.bias}

        def loss_fn(_):
            z = conv2d_forward(x, c1)
            a = relu(z)
            out = conv2d_forward(a, c2)
            d = out - target
            g = 2 * d
            ga, gk2, gb2 = conv2d_backward(g, a, c2)
            _, gk1, gb1 = conv2d_backward(relu_backward(ga, z), x, c1)
            return float((d * d).sum()), {"k1": gk1, "b1": gb1, "k2": gk2, "b2": gb2}

        assert grad_check(loss_fn, params, eps=1e-5, n_samples=60) <= 1e-4

    def test_restores_parameters(self, rng):
        params = {"w": rng.normal(size=5)}
        before = params["w"].copy()
        grad_check(lambda p: (float((p["w"] ** 2).sum()), {"w": 2 * p["w"]}), params)
        np.testing.assert_array_equal(params["w"], before)

    def test_detects_wrong_gradient(self, rng):
        params = {"w": rng.normal(size=5)}
        assert grad_check(lambda p: (float((p["w"] ** 2).sum()), {"w": 3 * p["w"]}), params) > 0.1
