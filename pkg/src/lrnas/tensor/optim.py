"""First-order optimizers and a plateau learning-rate schedule."""

from __future__ import annotations

import numpy as np


class Optimizer:
    def __init__(self, params, lr):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class SGD(Optimizer):
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf = [None] * len(self.params)

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf = self._buf[i]
                buf = g.copy() if buf is None else self.momentum * buf + g
                self._buf[i] = buf
                g = buf
            p.data -= (self.lr * g).astype(p.data.dtype)


class Adam(Optimizer):
    """Adam with L2 weight decay added to the gradient (not decoupled)."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(params, lr)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self):
        self._t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self._t
        c2 = 1 - b2**self._t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self._m[i] = b1 * self._m[i] + (1 - b1) * g
            self._v[i] = b2 * self._v[i] + (1 - b2) * g * g
            m_hat = self._m[i] / c1
            v_hat = self._v[i] / c2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


class ReduceOnPlateau:
    """Multiply the optimizer's lr by ``factor`` once the metric stalls for ``patience`` steps.

    ``mode='min'`` treats lower metrics as better, ``'max'`` higher.
    """

    def __init__(self, optimizer, mode="min", factor=0.1, patience=10):
        self.optimizer = optimizer
        self.mode = mode
        self.factor = factor
        self.patience = patience
        self.best = None
        self.stale = 0

    def _improved(self, metric):
        if self.best is None:
            return True
        return metric < self.best if self.mode == "min" else metric > self.best

    def step(self, metric):
        """Record ``metric``; returns True when it is a new best."""
        if self._improved(metric):
            self.best = metric
            self.stale = 0
            return True
        self.stale += 1
        if self.stale >= self.patience:
            self.optimizer.lr *= self.factor
            self.stale = 0
        return False
