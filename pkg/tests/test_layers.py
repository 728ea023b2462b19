"""Layer kernel tests against brute-force oracles and finite differences."""

import numpy as np
import pytest

from hypercrf.layers import (
    Conv3dLayer,
    CorruptRecordError,
    SgdConfig,
    conv3d_backward,
    conv3d_forward,
    deconv3d,
    deconv3d_backward,
    dense_backward,
    dense_forward,
    maxpool3d,
    relu,
    sgd_step,
    softmax,
    unpool3d,
)
from hypercrf.tensor import ShapeError, Tensor

from oracles import central_difference, check_gradient, conv3d_loop, maxpool_scan


def make_layer(rng, ci, co, extents, activation="identity", dtype=np.float64):
    k = rng.standard_normal((ci, *extents, co)).astype(dtype)
    b = rng.standard_normal(co).astype(dtype)
    return Conv3dLayer(Tensor.from_array(k, dtype=dtype), b, activation)


class TestConvForward:
    def test_all_ones_sums_window(self):
        x = Tensor.from_array(np.ones((1, 2, 2, 2)))
        layer = Conv3dLayer(Tensor.from_array(np.ones((1, 2, 2, 2, 1))), [0.0])
        out = conv3d_forward(x, layer)
        assert out.shape == (1, 1, 1, 1)
        np.testing.assert_allclose(out.view(), 8.0)

    def test_zero_kernels_give_bias(self):
        rng = np.random.default_rng(0)
        x = Tensor.from_array(rng.standard_normal((2, 5, 5, 4)))
        layer = Conv3dLayer(
            Tensor.from_array(np.zeros((2, 3, 3, 2, 3))), [1.5, -2.0, 0.25]
        )
        out = conv3d_forward(x, layer).view()
        for j, b in enumerate([1.5, -2.0, 0.25]):
            np.testing.assert_allclose(out[j], b)

    @pytest.mark.parametrize("padding", ["valid", "same"])
    def test_matches_loop_oracle(self, padding):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 4, 4, 5))
        layer = make_layer(rng, 2, 3, (3, 3, 3))
        got = conv3d_forward(Tensor.from_array(x, np.float64), layer, padding).view()
        want = conv3d_loop(x, layer.kernels.view(), layer.biases, padding)
        assert np.abs(got - want).max() < 1e-5

    def test_shape_mismatch_names_both(self):
        x = Tensor.from_array(np.zeros((2, 4, 4, 4)))
        layer = Conv3dLayer(Tensor.from_array(np.zeros((3, 3, 3, 3, 1))), [0.0])
        with pytest.raises(ShapeError, match="channels 2.*m_in 3"):
            conv3d_forward(x, layer)

    def test_underflow_rejected(self):
        x = Tensor.from_array(np.zeros((1, 2, 2, 2)))
        layer = Conv3dLayer(Tensor.from_array(np.zeros((1, 3, 3, 1, 1))), [0.0])
        with pytest.raises(ShapeError):
            conv3d_forward(x, layer, "valid")


class TestConvBackward:
    def test_zero_grad_out(self):
        rng = np.random.default_rng(1)
        x = Tensor.from_array(rng.standard_normal((2, 4, 4, 4)), np.float64)
        layer = make_layer(rng, 2, 2, (3, 3, 3))
        gz = Tensor.zeros((2, 2, 2, 2), dtype=np.float64)
        gx, gk, gb = conv3d_backward(x, layer, gz)
        assert not gx.data.any() and not gk.data.any() and not gb.any()

    def test_scalar_kernel_chain_rule(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 3, 3, 3))
        layer = Conv3dLayer(Tensor.from_array(np.full((1, 1, 1, 1, 1), 2.0), np.float64),
                            np.zeros(1), "identity")
        g = rng.standard_normal((1, 3, 3, 3))
        _, gk, _ = conv3d_backward(
            Tensor.from_array(x, np.float64), layer, Tensor.from_array(g, np.float64)
        )
        np.testing.assert_allclose(gk.view().squeeze(), np.sum(x * g), rtol=1e-12)

    @pytest.mark.parametrize("activation,padding", [
        ("identity", "valid"), ("sigmoid", "valid"), ("identity", "same"),
        ("sigmoid", "same"), ("relu", "valid"),
    ])
    def test_finite_differences(self, activation, padding):
        rng = np.random.default_rng(sum(map(ord, activation + padding)))
        x = rng.standard_normal((2, 4, 4, 3))
        layer = make_layer(rng, 2, 2, (3, 3, 1), activation)
        if activation == "relu":
            # keep pre-activations away from the kink
            pre = conv3d_loop(x, layer.kernels.view(), layer.biases, padding)
            assert np.abs(pre).min() > 1e-2
        probe = rng.standard_normal(
            conv3d_forward(Tensor.from_array(x, np.float64), layer, padding).shape
        )

        def loss_x(xv):
            out = conv3d_forward(Tensor.from_array(xv, np.float64), layer, padding)
            return float(np.sum(out.view() * probe))

        def loss_k(kv):
            lay = Conv3dLayer(Tensor.from_array(kv, np.float64), layer.biases, activation)
            out = conv3d_forward(Tensor.from_array(x, np.float64), lay, padding)
            return float(np.sum(out.view() * probe))

        gx, gk, gb = conv3d_backward(
            Tensor.from_array(x, np.float64), layer, Tensor.from_array(probe, np.float64),
            padding,
        )
        assert check_gradient(gx.view(), central_difference(loss_x, x)) < 1e-3
        assert check_gradient(gk.view(), central_difference(loss_k, layer.kernels.view())) < 1e-3

        def loss_b(bv):
            lay = Conv3dLayer(layer.kernels, bv, activation)
            out = conv3d_forward(Tensor.from_array(x, np.float64), lay, padding)
            return float(np.sum(out.view() * probe))

        assert check_gradient(gb, central_difference(loss_b, layer.biases)) < 1e-3


class TestPooling:
    def test_constant_input_tie_rule(self):
        x = Tensor.from_array(np.ones((1, 4, 4, 2)))
        rec = maxpool3d(x)
        np.testing.assert_allclose(rec.output.view(), 1.0)
        # first (lowest flat) index of each window wins ties
        _, want_idx = maxpool_scan(x.view())
        np.testing.assert_array_equal(rec.argmax_indices, want_idx)

    def test_single_window(self):
        x = Tensor.from_array(np.array([[1.0, 2.0], [3.0, 4.0]])[None, :, :, None])
        rec = maxpool3d(x)
        assert rec.output.view()[0, 0, 0, 0] == 4.0
        assert rec.argmax_indices[0, 0, 0, 0] == 3  # flat index of the 4

    def test_matches_scan_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((3, 6, 6, 3))
        rec = maxpool3d(Tensor.from_array(x, np.float64))
        want, want_idx = maxpool_scan(x)
        np.testing.assert_array_equal(rec.output.view(), want)
        np.testing.assert_array_equal(rec.argmax_indices, want_idx)

    def test_odd_extents_padded(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 5, 3, 2))
        rec = maxpool3d(Tensor.from_array(x, np.float64))
        want, want_idx = maxpool_scan(x)
        assert rec.output.shape == (1, 3, 2, 2)
        np.testing.assert_array_equal(rec.output.view(), want)
        np.testing.assert_array_equal(rec.argmax_indices, want_idx)

    def test_unpool_places_maxima(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 4, 4, 2))
        rec = maxpool3d(Tensor.from_array(x, np.float64))
        restored = unpool3d(rec, rec.output)
        nz = restored.view() != 0
        # nonzeros exactly at per-window maxima
        assert nz.sum() == rec.output.size
        np.testing.assert_array_equal(
            np.sort(restored.data[restored.data != 0]), np.sort(rec.output.data)
        )

    def test_unpool_zero(self):
        x = Tensor.from_array(np.arange(32, dtype=np.float32).reshape(2, 4, 2, 2))
        rec = maxpool3d(x)
        out = unpool3d(rec, Tensor.zeros(rec.output.shape))
        assert not out.data.any()

    def test_pool_unpool_pool_idempotent(self):
        # pooling always follows ReLU in these nets, so values are nonnegative;
        # with negative maxima the zeros introduced by unpooling would win.
        rng = np.random.default_rng(6)
        x = rng.uniform(0.0, 1.0, size=(2, 6, 6, 2))
        rec = maxpool3d(Tensor.from_array(x, np.float64))
        again = maxpool3d(unpool3d(rec, rec.output))
        np.testing.assert_array_equal(again.output.view(), rec.output.view())
        np.testing.assert_array_equal(again.argmax_indices, rec.argmax_indices)

    def test_corrupt_record(self):
        x = Tensor.from_array(np.ones((1, 4, 4, 1)))
        rec = maxpool3d(x)
        rec.argmax_indices = rec.argmax_indices + 1000
        with pytest.raises(CorruptRecordError):
            unpool3d(rec, rec.output)

    def test_unpool_shape_check(self):
        x = Tensor.from_array(np.ones((1, 4, 4, 1)))
        rec = maxpool3d(x)
        with pytest.raises(ShapeError):
            unpool3d(rec, Tensor.zeros((1, 3, 2, 1)))


class TestDeconv:
    def test_adjoint_identity(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            ci, co = rng.integers(1, 4, size=2)
            p, q = 2 * rng.integers(0, 2, size=2) + 1
            r = rng.integers(1, 4)
            sx, sy, sz = (rng.integers(e, e + 4) for e in (p, q, r))
            layer = make_layer(rng, ci, co, (p, q, r))
            layer = Conv3dLayer(layer.kernels, np.zeros(co), "identity")
            x = rng.standard_normal((ci, sx, sy, sz))
            y = rng.standard_normal((co, sx - p + 1, sy - q + 1, sz - r + 1))
            cx = conv3d_forward(Tensor.from_array(x, np.float64), layer).view()
            dy = deconv3d(Tensor.from_array(y, np.float64), layer).view()
            assert abs(np.sum(cx * y) - np.sum(x * dy)) < 1e-4

    def test_one_by_one_identity_kernel(self):
        x = Tensor.from_array(np.random.default_rng(9).standard_normal((1, 3, 3, 3)),
                              np.float64)
        layer = Conv3dLayer(Tensor.from_array(np.ones((1, 1, 1, 1, 1)), np.float64),
                            np.zeros(1), "identity")
        np.testing.assert_allclose(deconv3d(x, layer).view(), x.view())

    def test_zero_input(self):
        layer = make_layer(np.random.default_rng(10), 2, 3, (3, 3, 2))
        out = deconv3d(Tensor.zeros((3, 4, 4, 4), dtype=np.float64), layer)
        assert not out.data.any()

    def test_channel_mismatch(self):
        layer = make_layer(np.random.default_rng(11), 2, 3, (3, 3, 2))
        with pytest.raises(ShapeError, match="m_out"):
            deconv3d(Tensor.zeros((2, 4, 4, 4)), layer)

    @pytest.mark.parametrize("padding", ["valid", "same"])
    def test_finite_differences(self, padding):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((3, 3, 3, 2))
        layer = make_layer(rng, 2, 3, (3, 3, 1), "sigmoid")
        bias = rng.standard_normal(2)
        out = deconv3d(Tensor.from_array(x, np.float64), layer, padding, bias)
        probe = rng.standard_normal(out.shape)

        def loss_x(xv):
            o = deconv3d(Tensor.from_array(xv, np.float64), layer, padding, bias)
            return float(np.sum(o.view() * probe))

        def loss_k(kv):
            lay = Conv3dLayer(Tensor.from_array(kv, np.float64), layer.biases, "sigmoid")
            o = deconv3d(Tensor.from_array(x, np.float64), lay, padding, bias)
            return float(np.sum(o.view() * probe))

        def loss_b(bv):
            o = deconv3d(Tensor.from_array(x, np.float64), layer, padding, bv)
            return float(np.sum(o.view() * probe))

        gx, gk, gb = deconv3d_backward(
            Tensor.from_array(x, np.float64), layer,
            Tensor.from_array(probe, np.float64), padding, bias,
        )
        assert check_gradient(gx.view(), central_difference(loss_x, x)) < 1e-3
        assert check_gradient(gk.view(), central_difference(loss_k, layer.kernels.view())) < 1e-3
        assert check_gradient(gb, central_difference(loss_b, bias)) < 1e-3


class TestActivations:
    def test_softmax_symmetry(self):
        np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3)

    def test_relu(self):
        np.testing.assert_array_equal(
            relu(Tensor.from_array([-1.0, 2.0])).view(), [0.0, 2.0]
        )

    def test_softmax_overflow_safe(self):
        np.testing.assert_allclose(softmax([1000.0, 1000.0]), [0.5, 0.5])

    def test_softmax_probability_vector(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            logits = rng.uniform(-500, 500, size=rng.integers(1, 9))
            p = softmax(logits)
            assert (p >= 0).all()
            assert abs(p.sum() - 1.0) < 1e-6

    def test_softmax_empty_rejected(self):
        with pytest.raises(ValueError):
            softmax([])


class TestDense:
    def test_finite_differences(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((4, 5))
        w = rng.standard_normal((5, 3))
        b = rng.standard_normal(3)
        probe = rng.standard_normal((4, 3))
        gx, gw, gb = dense_backward(x, w, b, probe, "sigmoid")

        def lx(v):
            return float(np.sum(dense_forward(v, w, b, "sigmoid") * probe))

        def lw(v):
            return float(np.sum(dense_forward(x, v, b, "sigmoid") * probe))

        def lb(v):
            return float(np.sum(dense_forward(x, w, v, "sigmoid") * probe))

        assert check_gradient(gx, central_difference(lx, x)) < 1e-3
        assert check_gradient(gw, central_difference(lw, w)) < 1e-3
        assert check_gradient(gb, central_difference(lb, b)) < 1e-3


class TestSgd:
    def test_zero_gradient(self):
        w = np.array([1.0, 2.0])
        out = sgd_step(w, np.zeros(2), SgdConfig(learning_rate=0.1))
        np.testing.assert_array_equal(out, w)

    def test_arithmetic(self):
        out = sgd_step(np.array([1.0]), np.array([2.0]), SgdConfig(learning_rate=0.1))
        np.testing.assert_allclose(out, [0.8])

    def test_two_half_steps_equal_one(self):
        w = np.array([3.0])
        g = np.array([0.5])
        one = sgd_step(w, g, SgdConfig(learning_rate=0.2))
        half = SgdConfig(learning_rate=0.1)
        two = sgd_step(sgd_step(w, g, half), g, half)
        np.testing.assert_allclose(one, two)

    def test_nested_structures(self):
        params = {"a": [np.ones(2), np.ones(1)]}
        grads = {"a": [np.full(2, 2.0), np.zeros(1)]}
        out = sgd_step(params, grads, SgdConfig(learning_rate=0.5))
        np.testing.assert_allclose(out["a"][0], [0.0, 0.0])
        np.testing.assert_allclose(out["a"][1], [1.0])
