"""Parameter update rules over :class:`~learnpruner.autodiff.Tensor` lists."""
from __future__ import annotations

import numpy as np


def global_norm(tensors) -> float:
    return float(np.sqrt(sum(float((t.grad ** 2).sum()) for t in tensors if t.grad is not None)))


class SGD:
    def __init__(self, tensors, lr=1e-2):
        self.tensors = list(tensors)
        self.lr = lr

    def step(self, scale: float = 1.0):
        for p in self.tensors:
            if p.grad is not None:
                p.data = p.data - (self.lr * scale) * p.grad


class Adam:
    def __init__(self, tensors, lr=3e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def step(self, scale: float = 1.0):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, p in enumerate(self.tensors):
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g ** 2
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}
