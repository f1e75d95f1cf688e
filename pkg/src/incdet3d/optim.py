"""Adam with optional cosine learning-rate annealing."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .autodiff import Tensor


class Adam:
    """Standard Adam; a zero gradient leaves the parameter bit-identical.

    When total_steps is set the learning rate follows half a cosine from lr
    down to 0 over that many steps; otherwise it stays constant.
    """

    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, total_steps=None):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if total_steps is not None and total_steps <= 0:
            raise ConfigError("total_steps must be positive when given")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.total_steps = total_steps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        if self.total_steps is None:
            return self.lr
        frac = min(self.step_count / self.total_steps, 1.0)
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * frac))

    def step(self):
        lr_t = self.current_lr()
        t = self.step_count + 1
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.any(g):
                # no signal: decay moments but never move the parameter,
                # so masked or unreachable weights stay bit-identical
                self.m[i] *= self.beta1
                self.v[i] *= self.beta2
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data = p.data - lr_t * m_hat / (np.sqrt(v_hat) + self.eps)
        self.step_count = t

    def zero_grad(self):
        for p in self.params:
            p.grad = None
