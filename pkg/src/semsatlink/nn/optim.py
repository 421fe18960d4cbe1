"""SGD and Adam on flat parameter dicts, plus the training config record."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 0.0005
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> bool:
        """Apply one update in place. Returns False (no update) if any
        gradient is non-finite."""
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            return False
        for k, p in params.items():
            p -= self.lr * grads[k]
        return True


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> bool:
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in params.items():
            g = grads[k]
            m = self._m.setdefault(k, np.zeros_like(p))
            v = self._v.setdefault(k, np.zeros_like(p))
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.learning_rate)
    if config.optimizer == "adam":
        return Adam(config.learning_rate)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")
