"""
Optimizer for LaneTopoLab
Adam with decoupled weight decay over a ParamStore. Decay is applied to
matrix-shaped parameters only; biases, norms and 1-D tables are not decayed.
"""

import logging
from typing import Dict, Tuple

import numpy as np

from errors import ConfigurationError, NumericError
from numerics import ParamStore


class AdamW:
    """Constant learning rate AdamW"""

    def __init__(self, params: ParamStore, lr: float = 2e-4, weight_decay: float = 0.01,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ConfigurationError(f"betas must lie in [0, 1), got {betas}")
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {name: np.zeros_like(node.values) for name, node in params.items()}
        self.v: Dict[str, np.ndarray] = {name: np.zeros_like(node.values) for name, node in params.items()}
        self.logger = logging.getLogger(__name__)

    def decays(self, name: str) -> bool:
        return self.params[name].ndim >= 2

    @property
    def state_size(self) -> int:
        return int(sum(m.size for m in self.m.values()) + sum(v.size for v in self.v.values()))

    def zero_grad(self):
        self.params.zero_grad()

    def step(self):
        """Apply one update from the accumulated gradients; parameters without a gradient are skipped"""
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, node in self.params.items():
            if node.grad is None:
                continue
            g = node.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name} at optimizer step {self.t}")
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay and self.decays(name):
                node.values *= 1.0 - self.lr * self.weight_decay
            node.values -= (self.lr * update).astype(node.dtype, copy=False)
