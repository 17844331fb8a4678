"""First-order optimizers operating on diffengine leaf tensors."""

from __future__ import annotations

import numpy as np

from .diffengine import Tensor


class Adam:
    """Adam with optional per-parameter learning-rate scales.

    `params` is a list of Tensor or (Tensor, lr_scale) entries.  step()
    consumes Tensor.grad as filled by Tape.backward and updates values in
    place; parameters whose grad is None are skipped that step.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.entries = []
        for p in params:
            if isinstance(p, Tensor):
                p = (p, 1.0)
            tensor, scale = p
            self.entries.append({
                "tensor": tensor,
                "scale": float(scale),
                "m": np.zeros_like(tensor.value),
                "v": np.zeros_like(tensor.value),
            })
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for e in self.entries:
            g = e["tensor"].grad
            if g is None:
                continue
            e["m"] *= b1
            e["m"] += (1 - b1) * g
            e["v"] *= b2
            e["v"] += (1 - b2) * g * g
            mhat = e["m"] / bias1
            vhat = e["v"] / bias2
            e["tensor"].value -= (self.lr * e["scale"]) * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for e in self.entries:
            e["tensor"].grad = None
