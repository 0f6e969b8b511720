"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, ShapeError


def cosine_lr(step, total, lr_max, lr_min=0.0):
    """lr(step) = lr_min + 0.5*(lr_max - lr_min)*(1 + cos(pi*step/total))."""
    if total < 1:
        raise ContractError(f"cosine_lr needs total >= 1, got {total}")
    if not 0 <= step <= total:
        raise ContractError(f"cosine_lr step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


class AdamW:
    """Holds first/second moments and the step counter for a parameter list.

    The decoupled decay theta <- theta*(1 - lr*wd) is applied before the
    Adam update with bias correction.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        """One AdamW update from the accumulated grads; missing grads mean zero."""
        if lr is None:
            lr = self.lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"grad shape {g.shape} does not match param {p.data.shape}"
                )
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adamw_step(params, grads, state):
    """Functional form: assign `grads` to `params` and advance `state` once."""
    if len(params) != len(grads):
        raise ShapeError("params and grads length mismatch")
    for p, g in zip(params, grads):
        if np.shape(g) != p.data.shape:
            raise ShapeError(
                f"grad shape {np.shape(g)} does not match param {p.data.shape}"
            )
        p.grad = np.asarray(g, dtype=np.float64)
    state.step()
    return params
