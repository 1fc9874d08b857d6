"""AdamW with decoupled weight decay (moments live on each Parameter)."""

from __future__ import annotations

from typing import Iterable, Tuple

import numpy as np

DEFAULT_LR = 0.004


def adamw_step(params: Iterable, lr: float = DEFAULT_LR,
               betas: Tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.01,
               eps: float = 1e-8) -> None:
    b1, b2 = betas
    for p in params:
        g = p.grad
        if g is None:
            continue
        p.step += 1
        p.data *= 1.0 - lr * weight_decay
        p.m = b1 * p.m + (1.0 - b1) * g
        p.v = b2 * p.v + (1.0 - b2) * g * g
        bc1 = 1.0 - b1 ** p.step
        bc2 = 1.0 - b2 ** p.step
        denom = np.sqrt(p.v) / np.sqrt(bc2) + eps
        p.data -= (lr / bc1) * p.m / denom


class AdamW:
    def __init__(self, params, lr=DEFAULT_LR, betas=(0.9, 0.999), weight_decay=0.01, eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.weight_decay, self.eps = lr, betas, weight_decay, eps

    def step(self):
        adamw_step(self.params, self.lr, self.betas, self.weight_decay, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
