"""Minimal float64 tensor/NN core with hand-written backpropagation.

Everything trained in this repo (segmenter, codec, selector, refiner,
detectors) runs on these layers. CPU only, deterministic per seed.
"""

from .layers import (
    Activation,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Layer,
    LayerSpec,
    QuantizeSTE,
    ShapeError,
    build_layer,
    glorot_uniform,
    quantize_ste,
)
from .net import Sequential
from .optim import Adam, SGD, TrainConfig, make_optimizer
from .checkpoint import load_weights, save_weights

__all__ = [
    "Activation",
    "Adam",
    "Conv2d",
    "ConvTranspose2d",
    "Dense",
    "Layer",
    "LayerSpec",
    "QuantizeSTE",
    "SGD",
    "Sequential",
    "ShapeError",
    "TrainConfig",
    "build_layer",
    "glorot_uniform",
    "load_weights",
    "make_optimizer",
    "quantize_ste",
    "save_weights",
]
