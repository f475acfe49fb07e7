"""Adam, the one-cycle learning-rate schedule, and gradient clipping."""

from __future__ import annotations

import math

import numpy as np


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            self.params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(self.params[k].dtype)


def one_cycle_lr(step, total, max_lr, div_factor=10.0, final_div_factor=10.0, pct_start=0.3):
    """Cosine one-cycle schedule: max_lr/div_factor -> max_lr -> max_lr/final_div_factor."""
    start = max_lr / div_factor
    end = max_lr / final_div_factor
    if total <= 1:
        return start
    up = max(int(round(pct_start * (total - 1))), 1)
    if step <= up:
        a, b, frac = start, max_lr, step / up
    else:
        a, b, frac = max_lr, end, (step - up) / max(total - 1 - up, 1)
    return b + (a - b) * (1 + math.cos(math.pi * min(frac, 1.0))) / 2


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= s
    return total
