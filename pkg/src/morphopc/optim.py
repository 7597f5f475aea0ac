"""Adam with bias correction, state stored on each Parameter."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update on every parameter, then clear its gradient.

    Raises ``ValueError`` naming the first parameter whose gradient is unset.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '<unnamed>'!r} has no gradient")
    for p in params:
        g = p.grad
        p.step += 1
        p.m *= beta1
        p.m += (1 - beta1) * g
        p.v *= beta2
        p.v += (1 - beta2) * (g * g)
        mhat = p.m / (1 - beta1**p.step)
        vhat = p.v / (1 - beta2**p.step)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype, copy=False)
        p.grad = None


class Adam:
    """Thin holder for hyperparameters so a schedule can adjust ``lr``."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        # parameters unreachable from this step's loss keep their state
        live = [p for p in self.params if p.grad is not None]
        adam_step(live, self.lr, self.beta1, self.beta2, self.eps)
