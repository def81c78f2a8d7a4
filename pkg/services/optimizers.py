"""
First-order optimizers over named numpy parameters.

``step`` takes the current values and gradients keyed by parameter name and
returns the new values; the caller writes them back into the network.
"""

import logging
from typing import Dict

import numpy as np

from models import TrainConfig

logger = logging.getLogger(__name__)

Arrays = Dict[str, np.ndarray]


class Optimizer:
    kind = "base"

    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate
        self.steps = 0

    def step(self, params: Arrays, grads: Arrays) -> Arrays:
        raise NotImplementedError

    def state(self) -> Arrays:
        """Buffers to persist, prefixed by their role"""
        return {}

    def load_state(self, state: Arrays, steps: int) -> None:
        self.steps = steps


class SGDMomentum(Optimizer):
    kind = "sgd-momentum"

    def __init__(self, learning_rate: float, momentum: float = 0.9):
        super().__init__(learning_rate)
        self.momentum = momentum
        self.velocity: Arrays = {}

    def step(self, params: Arrays, grads: Arrays) -> Arrays:
        """Шаг SGD с моментом"""
        self.steps += 1
        updated = {}
        for name, value in params.items():
            v = self.momentum * self.velocity.get(name, 0.0) + grads[name]
            self.velocity[name] = v
            updated[name] = value - self.learning_rate * v
        return updated

    def state(self) -> Arrays:
        return {f"velocity.{name}": v for name, v in self.velocity.items()}

    def load_state(self, state: Arrays, steps: int) -> None:
        super().load_state(state, steps)
        self.velocity = {k[len("velocity."):]: v.copy() for k, v in state.items() if k.startswith("velocity.")}


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.first: Arrays = {}
        self.second: Arrays = {}

    def step(self, params: Arrays, grads: Arrays) -> Arrays:
        """Шаг Adam с поправкой смещения моментов"""
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        updated = {}
        for name, value in params.items():
            g = grads[name]
            m = self.beta1 * self.first.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.second.get(name, 0.0) + (1.0 - self.beta2) * g * g
            self.first[name], self.second[name] = m, v
            updated[name] = value - self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
        return updated

    def state(self) -> Arrays:
        out = {f"first.{name}": m for name, m in self.first.items()}
        out.update({f"second.{name}": v for name, v in self.second.items()})
        return out

    def load_state(self, state: Arrays, steps: int) -> None:
        super().load_state(state, steps)
        self.first = {k[len("first."):]: v.copy() for k, v in state.items() if k.startswith("first.")}
        self.second = {k[len("second."):]: v.copy() for k, v in state.items() if k.startswith("second.")}


def build_optimizer(cfg: TrainConfig) -> Optimizer:
    """Оптимизатор по конфигурации обучения"""
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate)
    return SGDMomentum(cfg.learning_rate, cfg.momentum)
