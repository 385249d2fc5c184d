"""First-order optimizers over lists of parameter nodes.

Parameters whose ``requires_grad`` flag is off are skipped and their
gradients dropped, which is how frozen groups stay bitwise untouched.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .autodiff import Node


class Optimizer:
    def __init__(self, params: Iterable[Node], lr: float):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if not p.requires_grad:
                p.grad = None
                continue
            if p.grad is None:
                continue
            self._update(i, p)

    def _update(self, i: int, p: Node) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self, i: int, p: Node) -> None:
        p.value = (p.value - p.value.dtype.type(self.lr) * p.grad).astype(p.value.dtype)


class Adam(Optimizer):
    """Adaptive moments with bias correction."""

    def __init__(self, params: Iterable[Node], lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = [0] * len(self.params)

    def _update(self, i: int, p: Node) -> None:
        g = p.grad
        self.t[i] += 1
        t = self.t[i]
        self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
        self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
        mhat = self.m[i] / (1 - self.b1**t)
        vhat = self.v[i] / (1 - self.b2**t)
        p.value = (p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.value.dtype)


def make_optimizer(name: str, params: Iterable[Node], lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> Optimizer:
    if name == "sgd":
        return SGD(params, lr)
    if name in ("adam", "adaptive-moments"):
        return Adam(params, lr, betas=tuple(betas), eps=eps)
    raise ValueError(f"unknown optimizer {name!r}")
