import numpy as np
import pytest

from semsatlink.nn import (
    Activation,
    Adam,
    Conv2d,
    ConvTranspose2d,
    Dense,
    LayerSpec,
    QuantizeSTE,
    SGD,
    Sequential,
    ShapeError,
    TrainConfig,
    build_layer,
    load_weights,
    make_optimizer,
    quantize_ste,
    save_weights,
)


def conv2d_same_oracle(x, weight, bias, stride):
    """Nested-loop same-padded strided convolution, independent of im2col."""
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    ho, wo = -(-h // stride), -(-w // stride)
    pt = max((ho - 1) * stride + k - h, 0) // 2
    pl = max((wo - 1) * stride + k - w, 0) // 2
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for dy in range(k):
                            for dx in range(k):
                                sy = yi * stride + dy - pt
                                sx = xi * stride + dx - pl
                                if 0 <= sy < h and 0 <= sx < w:
                                    acc += x[ni, ci, sy, sx] * weight[oi, ci, dy, dx]
                    out[ni, oi, yi, xi] = acc + bias[oi]
    return out


def fd_param_grad(net, x, loss_grad, params, step=1e-5):
    """Central finite differences of sum(loss_grad * net(x)) per parameter."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + step
            hi = float((loss_grad * net.forward(x)).sum())
            p[idx] = orig - step
            lo = float((loss_grad * net.forward(x)).sum())
            p[idx] = orig
            g[idx] = (hi - lo) / (2 * step)
            it.iternext()
        out[name] = g
    return out


def fd_input_grad(net, x, loss_grad, step=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = float((loss_grad * net.forward(x)).sum())
        x[idx] = orig - step
        lo = float((loss_grad * net.forward(x)).sum())
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * step)
        it.iternext()
    return g


def max_rel_err(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / scale


class TestForward:
    def test_one_by_one_all_one_kernel_sums_channels(self):
        conv = Conv2d(2, 1, 1, 1, np.random.default_rng(0))
        conv.weight[...] = 1.0
        conv.bias[...] = 0.0
        x = np.random.default_rng(1).normal(size=(1, 2, 4, 5))
        out = conv.forward(x)
        np.testing.assert_allclose(out[0, 0], x[0, 0] + x[0, 1], atol=1e-12)

    def test_identity_dense(self):
        dense = Dense(6, 6, np.random.default_rng(0))
        dense.weight[...] = np.eye(6)
        dense.bias[...] = 0.0
        x = np.random.default_rng(1).normal(size=(3, 6))
        np.testing.assert_array_equal(dense.forward(x), x)

    def test_conv_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(7)
        conv = Conv2d(3, 4, 3, 2, rng)
        x = rng.normal(size=(2, 3, 6, 8))
        expected = conv2d_same_oracle(x, conv.weight, conv.bias, 2)
        np.testing.assert_allclose(conv.forward(x), expected, atol=1e-12)

    def test_conv_stride_downsamples_exactly(self):
        conv = Conv2d(3, 8, 9, 4, np.random.default_rng(0))
        out = conv.forward(np.zeros((1, 3, 64, 32)))
        assert out.shape == (1, 8, 16, 8)

    def test_tconv_upsamples_exactly(self):
        t = ConvTranspose2d(8, 3, 9, 4, np.random.default_rng(0))
        out = t.forward(np.zeros((1, 8, 16, 8)))
        assert out.shape == (1, 3, 64, 32)

    def test_tconv_is_adjoint_of_conv(self):
        # <conv(x), y> == <x, tconv(y)> when they share the weight
        rng = np.random.default_rng(3)
        conv = Conv2d(2, 3, 3, 2, rng)
        conv.bias[...] = 0.0
        t = ConvTranspose2d(3, 2, 3, 2, rng)
        t.weight = conv.weight
        t.bias = np.zeros(2)
        x = rng.normal(size=(1, 2, 6, 4))
        y = rng.normal(size=(1, 3, 3, 2))
        lhs = float((conv.forward(x) * y).sum())
        rhs = float((x * t.forward(y)).sum())
        assert abs(lhs - rhs) < 1e-10

    def test_shape_mismatch_names_layer(self):
        conv = Conv2d(3, 4, 3, 1, np.random.default_rng(0), name="enc1")
        with pytest.raises(ShapeError, match="enc1"):
            conv.forward(np.zeros((1, 2, 8, 8)))

    def test_forward_deterministic(self):
        net = Sequential([
            Conv2d(1, 2, 3, 2, np.random.default_rng(5)),
            Activation("relu"),
        ])
        x = np.random.default_rng(9).normal(size=(2, 1, 8, 8))
        a = net.forward(x)
        b = net.forward(x)
        np.testing.assert_array_equal(a, b)


class TestBackwardFiniteDifferences:
    TOL = 1e-4

    def check(self, net, x_shape, seed=0):
        rng = np.random.default_rng(seed)
        net.zero_grads()
        x = rng.normal(size=x_shape)
        out = net.forward(x)
        loss_grad = rng.normal(size=out.shape)
        gin = net.backward(loss_grad)
        fd_p = fd_param_grad(net, x, loss_grad, net.params())
        for name, g in net.grads().items():
            assert max_rel_err(g, fd_p[name]) < self.TOL, name
        assert max_rel_err(gin, fd_input_grad(net, x, loss_grad)) < self.TOL

    def test_dense(self):
        self.check(Sequential([Dense(5, 4, np.random.default_rng(1))]), (3, 5))

    def test_conv2d(self):
        self.check(Sequential([Conv2d(2, 3, 3, 2, np.random.default_rng(2))]),
                   (2, 2, 6, 4))

    def test_conv2d_stride4_window9(self):
        self.check(Sequential([Conv2d(1, 2, 9, 4, np.random.default_rng(3))]),
                   (1, 1, 8, 8))

    def test_transposed_conv2d(self):
        self.check(
            Sequential([ConvTranspose2d(3, 2, 3, 2, np.random.default_rng(4))]),
            (2, 3, 3, 2))

    def test_relu(self):
        # keep inputs away from the kink at 0
        rng = np.random.default_rng(5)
        net = Sequential([Activation("relu")])
        x = rng.normal(size=(3, 7))
        x[np.abs(x) < 1e-2] = 0.5
        loss_grad = rng.normal(size=x.shape)
        net.forward(x)
        gin = net.backward(loss_grad)
        assert max_rel_err(gin, fd_input_grad(net, x, loss_grad)) < self.TOL

    def test_sigmoid(self):
        self.check(Sequential([Dense(4, 3, np.random.default_rng(6)),
                               Activation("sigmoid")]), (2, 4))

    def test_tanh(self):
        self.check(Sequential([Dense(4, 3, np.random.default_rng(7)),
                               Activation("tanh")]), (2, 4))

    def test_softmax(self):
        self.check(Sequential([Dense(4, 3, np.random.default_rng(8)),
                               Activation("softmax", axis=-1)]), (2, 4))

    def test_small_random_network(self):
        rng = np.random.default_rng(11)
        net = Sequential([
            Conv2d(1, 2, 3, 2, rng),
            Activation("relu"),
            ConvTranspose2d(2, 1, 3, 2, rng),
            Activation("tanh"),
        ])
        self.check(net, (2, 1, 4, 4), seed=12)


class TestQuantize:
    def test_sign_with_tie_to_plus_one(self):
        np.testing.assert_array_equal(
            quantize_ste(np.array([0.3, -0.7, 0.0])), [1.0, -1.0, 1.0])

    def test_output_is_exactly_pm_one_and_idempotent(self):
        x = np.random.default_rng(0).normal(size=(100,))
        q = quantize_ste(x)
        assert set(np.unique(q)) <= {-1.0, 1.0}
        np.testing.assert_array_equal(quantize_ste(q), q)

    def test_straight_through_in_range(self):
        layer = QuantizeSTE()
        layer.forward(np.array([0.5]))
        np.testing.assert_array_equal(layer.backward(np.array([2.0])), [2.0])

    def test_clipped_out_of_range(self):
        layer = QuantizeSTE()
        layer.forward(np.array([3.0]))
        np.testing.assert_array_equal(layer.backward(np.array([2.0])), [0.0])

    def test_boundary_passes(self):
        layer = QuantizeSTE()
        layer.forward(np.array([1.0, -1.0, 1.0000001]))
        np.testing.assert_array_equal(
            layer.backward(np.ones(3)), [1.0, 1.0, 0.0])


class TestSoftmaxProperties:
    def test_sums_to_one_and_open_interval(self):
        rng = np.random.default_rng(0)
        act = Activation("softmax", axis=-1)
        for _ in range(20):
            y = act.forward(rng.normal(scale=5.0, size=(4, 9)))
            np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
            assert np.all(y > 0) and np.all(y < 1)


class TestOptimizers:
    def test_sgd_definition(self):
        params = {"w": np.array([1.0])}
        assert SGD(0.1).step(params, {"w": np.array([0.5])})
        np.testing.assert_allclose(params["w"], [0.95])

    def test_adam_first_step_magnitude(self):
        # first Adam step: lr * g / (sqrt(g^2) + eps) ~= lr, independent of |g|
        params = {"w": np.array([2.0])}
        opt = Adam(0.0005)
        opt.step(params, {"w": np.array([4.0])})
        expected = 2.0 - 0.0005 * 4.0 / (np.sqrt(16.0) + 1e-8)
        np.testing.assert_allclose(params["w"], [expected], rtol=1e-12)

    def test_zero_gradient_leaves_weights(self):
        params = {"w": np.array([1.0, -2.0])}
        Adam(0.1).step(params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_non_finite_gradient_rejected(self):
        params = {"w": np.array([1.0])}
        before = params["w"].copy()
        assert not Adam(0.1).step(params, {"w": np.array([np.nan])})
        assert not SGD(0.1).step(params, {"w": np.array([np.inf])})
        np.testing.assert_array_equal(params["w"], before)

    def test_make_optimizer(self):
        assert isinstance(make_optimizer(TrainConfig(optimizer="sgd")), SGD)
        assert isinstance(make_optimizer(TrainConfig(optimizer="adam")), Adam)

    def test_train_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestLayerSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            LayerSpec("conv2d", stride=0)
        with pytest.raises(ValueError):
            LayerSpec("conv2d", window=0)
        with pytest.raises(ValueError):
            LayerSpec("conv2d", in_channels=0)

    def test_build_layer_round_trip(self):
        rng = np.random.default_rng(0)
        specs = [
            LayerSpec("conv2d", window=3, stride=2, in_channels=2,
                      out_channels=4),
            LayerSpec("activation", activation="relu"),
            LayerSpec("transposed-conv2d", window=3, stride=2, in_channels=4,
                      out_channels=2),
            LayerSpec("quantize"),
            LayerSpec("dense", in_features=2 * 4 * 4, out_features=3),
            LayerSpec("activation", activation="softmax"),
        ]
        net = Sequential([build_layer(s, rng) for s in specs])
        out = net.forward(np.random.default_rng(1).normal(size=(2, 2, 4, 4)))
        assert out.shape == (2, 3)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        arrays = {
            "enc.conv1.weight": np.random.default_rng(0).normal(size=(4, 3, 2)),
            "enc.conv1.bias": np.arange(4.0),
        }
        path = tmp_path / "w.ckpt"
        save_weights(str(path), arrays)
        loaded = load_weights(str(path))
        assert set(loaded) == set(arrays)
        for k in arrays:
            np.testing.assert_array_equal(loaded[k], arrays[k])

    def test_truncated_file_reports(self, tmp_path):
        path = tmp_path / "w.ckpt"
        save_weights(str(path), {"a": np.ones(8)})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_weights(str(path))

    def test_set_params_and_shape_check(self):
        net = Sequential([Dense(3, 2, np.random.default_rng(0))])
        p = net.params()
        net.set_params({"dense.weight": np.ones((3, 2))})
        np.testing.assert_array_equal(p["dense.weight"], np.ones((3, 2)))
        with pytest.raises(ValueError):
            net.set_params({"dense.weight": np.ones((2, 3))})
        with pytest.raises(KeyError):
            net.set_params({"nope": np.ones(1)})
