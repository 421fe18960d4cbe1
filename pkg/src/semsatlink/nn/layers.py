"""Layers with explicit forward/backward passes on float64 numpy arrays.

Convolutions use "same" spatial padding before the stride (TensorFlow
convention), so an input extent divisible by the stride shrinks by exactly
that factor. Transposed convolutions are the exact adjoint of the matching
strided convolution and therefore upsample by exactly the stride factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Input shape incompatible with a layer; message names the layer."""


def glorot_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int,
                   rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class LayerSpec:
    """Declarative layer description used to assemble networks.

    kind is one of "dense", "conv2d", "transposed-conv2d", "activation",
    "quantize". window/stride apply to the conv kinds, in_features and
    out_features to dense, activation to the activation kind.
    """

    kind: str
    window: int = 1
    stride: int = 1
    in_channels: int = 1
    out_channels: int = 1
    in_features: int = 0
    out_features: int = 0
    activation: str = "relu"

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")


class Layer:
    """Base class: forward caches what backward needs; backward returns the
    input gradient and fills self.grads for any parameters."""

    name = "layer"

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def zero_grads(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params().items()}


def _same_pad(extent: int, window: int, stride: int) -> tuple[int, int]:
    out = -(-extent // stride)
    total = max((out - 1) * stride + window - extent, 0)
    return total // 2, total - total // 2


def _im2col(xp: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Strided view (N, C, Ho, Wo, k, k) over an already padded input."""
    n, c, h, w = xp.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, ho, wo, window, window),
        (sn, sc, sh * stride, sw * stride, sh, sw))


def _conv_forward(xp, weight, stride):
    cols = _im2col(xp, weight.shape[2], stride)
    # (N, Ho, Wo, C*k*k) @ (C*k*k, O)
    n, c, ho, wo, k, _ = cols.shape
    flat = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)
    out = flat @ weight.reshape(weight.shape[0], -1).T
    return out.transpose(0, 3, 1, 2), cols


def _conv_weight_grad(cols, grad_out):
    # cols: (N, C, Ho, Wo, k, k); grad_out: (N, O, Ho, Wo)
    return np.einsum("nchwij,nohw->ocij", cols, grad_out, optimize=True)


def _conv_input_grad(grad_out, weight, padded_shape, stride):
    """Scatter grad_out back through the conv: adjoint of _conv_forward."""
    n, o, ho, wo = grad_out.shape
    _, c, k, _ = weight.shape
    gp = np.zeros(padded_shape)
    # contributions per kernel offset: (N, Ho, Wo, C, k, k)
    contrib = np.einsum("nohw,ocij->nhwcij", grad_out, weight, optimize=True)
    for i in range(k):
        for j in range(k):
            gp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return gp


class Conv2d(Layer):
    """Strided 2-D convolution with same padding, NCHW layout."""

    def __init__(self, in_channels: int, out_channels: int, window: int,
                 stride: int = 1, rng: np.random.Generator | None = None,
                 name: str = "conv2d"):
        self.name = name
        self.window = window
        self.stride = stride
        self.in_channels = in_channels
        self.out_channels = out_channels
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * window * window
        fan_out = out_channels * window * window
        self.weight = glorot_uniform(
            (out_channels, in_channels, window, window), fan_in, fan_out, rng)
        self.bias = np.zeros(out_channels)
        self.zero_grads()

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"{self.name}: expected (N, {self.in_channels}, H, W), "
                f"got {x.shape}")
        ph = _same_pad(x.shape[2], self.window, self.stride)
        pw = _same_pad(x.shape[3], self.window, self.stride)
        xp = np.pad(x, ((0, 0), (0, 0), ph, pw))
        out, cols = _conv_forward(xp, self.weight, self.stride)
        self._cache = (cols, xp.shape, ph, pw, x.shape)
        return out + self.bias[None, :, None, None]

    def backward(self, grad_out):
        cols, padded_shape, ph, pw, in_shape = self._cache
        self.grads["weight"] += _conv_weight_grad(cols, grad_out)
        self.grads["bias"] += grad_out.sum(axis=(0, 2, 3))
        gp = _conv_input_grad(grad_out, self.weight, padded_shape, self.stride)
        h, w = in_shape[2], in_shape[3]
        return gp[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + w]


class ConvTranspose2d(Layer):
    """Adjoint of a same-padded strided Conv2d: upsamples by the stride.

    Weight is stored in the adjoint conv's orientation
    (in_channels, out_channels, k, k), mapping (N, in, h, w) to
    (N, out, h*stride, w*stride).
    """

    def __init__(self, in_channels: int, out_channels: int, window: int,
                 stride: int = 1, rng: np.random.Generator | None = None,
                 name: str = "tconv2d"):
        self.name = name
        self.window = window
        self.stride = stride
        self.in_channels = in_channels
        self.out_channels = out_channels
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * window * window
        fan_out = out_channels * window * window
        self.weight = glorot_uniform(
            (in_channels, out_channels, window, window), fan_in, fan_out, rng)
        self.bias = np.zeros(out_channels)
        self.zero_grads()

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def _geometry(self, h_in, w_in):
        h_out, w_out = h_in * self.stride, w_in * self.stride
        ph = _same_pad(h_out, self.window, self.stride)
        pw = _same_pad(w_out, self.window, self.stride)
        padded = (h_out + ph[0] + ph[1], w_out + pw[0] + pw[1])
        return h_out, w_out, ph, pw, padded

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"{self.name}: expected (N, {self.in_channels}, h, w), "
                f"got {x.shape}")
        n = x.shape[0]
        h_out, w_out, ph, pw, padded = self._geometry(x.shape[2], x.shape[3])
        gp = _conv_input_grad(x, self.weight, (n, self.out_channels) + padded,
                              self.stride)
        out = gp[:, :, ph[0]:ph[0] + h_out, pw[0]:pw[0] + w_out]
        self._cache = (x, ph, pw)
        return out + self.bias[None, :, None, None]

    def backward(self, grad_out):
        x, ph, pw = self._cache
        gp = np.pad(grad_out, ((0, 0), (0, 0), ph, pw))
        g_in, cols = _conv_forward(gp, self.weight, self.stride)
        self.grads["weight"] += _conv_weight_grad(cols, x)
        self.grads["bias"] += grad_out.sum(axis=(0, 2, 3))
        return g_in


class Dense(Layer):
    """Fully connected layer; flattens any trailing input dimensions."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, name: str = "dense"):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        rng = rng or np.random.default_rng(0)
        self.weight = glorot_uniform((in_features, out_features),
                                     in_features, out_features, rng)
        self.bias = np.zeros(out_features)
        self.zero_grads()

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        self._in_shape = x.shape
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise ShapeError(
                f"{self.name}: expected {self.in_features} features, "
                f"got {flat.shape[1]} from input shape {x.shape}")
        self._x = flat
        return flat @ self.weight + self.bias

    def backward(self, grad_out):
        self.grads["weight"] += self._x.T @ grad_out
        self.grads["bias"] += grad_out.sum(axis=0)
        return (grad_out @ self.weight.T).reshape(self._in_shape)


class Activation(Layer):
    """Elementwise relu/sigmoid/tanh, or softmax over a chosen axis."""

    KINDS = ("relu", "sigmoid", "tanh", "softmax")

    def __init__(self, kind: str, axis: int = 1, name: str | None = None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self.axis = axis
        self.name = name or kind

    def forward(self, x):
        if self.kind == "relu":
            self._mask = x > 0
            return np.maximum(x, 0.0)
        if self.kind == "sigmoid":
            self._y = 1.0 / (1.0 + np.exp(-x))
            return self._y
        if self.kind == "tanh":
            self._y = np.tanh(x)
            return self._y
        ax = self.axis if x.ndim > 1 else -1
        z = x - x.max(axis=ax, keepdims=True)
        e = np.exp(z)
        self._y = e / e.sum(axis=ax, keepdims=True)
        self._ax = ax
        return self._y

    def backward(self, grad_out):
        if self.kind == "relu":
            return grad_out * self._mask
        if self.kind == "sigmoid":
            return grad_out * self._y * (1.0 - self._y)
        if self.kind == "tanh":
            return grad_out * (1.0 - self._y ** 2)
        dot = (grad_out * self._y).sum(axis=self._ax, keepdims=True)
        return self._y * (grad_out - dot)


class QuantizeSTE(Layer):
    """One-bit quantizer: sign with ties to +1, clipped straight-through.

    Backward passes the upstream gradient where |pre-activation| <= 1 and
    zeroes it elsewhere.
    """

    name = "quantize"

    def forward(self, x):
        self._pass = np.abs(x) <= 1.0
        return np.where(x >= 0.0, 1.0, -1.0)

    def backward(self, grad_out):
        return grad_out * self._pass


def quantize_ste(x: np.ndarray) -> np.ndarray:
    """Functional one-bit quantization: +1 where x >= 0, else -1."""
    return np.where(np.asarray(x, dtype=float) >= 0.0, 1.0, -1.0)


def build_layer(spec: LayerSpec, rng: np.random.Generator,
                name: str | None = None) -> Layer:
    """Instantiate a layer from its declarative spec."""
    if spec.kind == "dense":
        return Dense(spec.in_features, spec.out_features, rng,
                     name or "dense")
    if spec.kind == "conv2d":
        return Conv2d(spec.in_channels, spec.out_channels, spec.window,
                      spec.stride, rng, name or "conv2d")
    if spec.kind == "transposed-conv2d":
        return ConvTranspose2d(spec.in_channels, spec.out_channels,
                               spec.window, spec.stride, rng,
                               name or "tconv2d")
    if spec.kind == "activation":
        return Activation(spec.activation, name=name)
    if spec.kind == "quantize":
        return QuantizeSTE()
    raise ValueError(f"unknown layer kind {spec.kind!r}")
