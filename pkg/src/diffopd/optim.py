"""Adam on a flat parameter vector."""
from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, n_params: int, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def update(self, grad: np.ndarray) -> np.ndarray:
        """Advance the moment estimates and return the step to add to the params."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        delta = self.update(grad)
        params += delta
        return delta
