"""Sequential container over layers, with flat parameter access."""

from __future__ import annotations

import numpy as np

from .layers import Layer


class Sequential:
    def __init__(self, layers: list[Layer], name: str = "net"):
        self.layers = layers
        self.name = name
        seen: dict[str, int] = {}
        self._keys = []
        for layer in layers:
            n = seen.get(layer.name, 0)
            seen[layer.name] = n + 1
            self._keys.append(layer.name if n == 0 else f"{layer.name}.{n}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def zero_grads(self) -> None:
        for layer in self.layers:
            layer.zero_grads()

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for key, layer in zip(self._keys, self.layers):
            for pname, arr in layer.params().items():
                out[f"{key}.{pname}"] = arr
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for key, layer in zip(self._keys, self.layers):
            for pname in layer.params():
                out[f"{key}.{pname}"] = layer.grads[pname]
        return out

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        """Copy values into the network's parameter arrays in place."""
        own = self.params()
        for k, v in values.items():
            if k not in own:
                raise KeyError(f"{self.name}: unknown parameter {k!r}")
            if own[k].shape != v.shape:
                raise ValueError(
                    f"{self.name}: shape mismatch for {k}: "
                    f"{own[k].shape} vs {v.shape}")
            own[k][...] = v
