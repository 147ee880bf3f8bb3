"""Adam and the poly learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["Adam", "poly_lr"]


def poly_lr(lr0: float, it: int, max_iter: int, power: float = 0.9) -> float:
    """``lr0 * (1 - it / max_iter) ** power``, clipped to 0 past ``max_iter``."""
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    frac = min(max(it / max_iter, 0.0), 1.0)
    return lr0 * (1.0 - frac) ** power


class Adam:
    """Adam with per-parameter state.

    A parameter whose ``grad`` is ``None`` (not reached by the loss) or
    identically zero is skipped entirely, so neither its value nor its moments
    change.  This keeps a task's DLM state frozen on steps where that task
    contributed nothing, including a zero loss weight.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state: dict[int, dict] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            g = p.grad
            if g is None or not g.any():
                continue
            st = self.state.get(id(p))
            if st is None:
                st = self.state[id(p)] = {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            st["t"] += 1
            st["m"] = b1 * st["m"] + (1 - b1) * g
            st["v"] = b2 * st["v"] + (1 - b2) * g * g
            mhat = st["m"] / (1 - b1 ** st["t"])
            vhat = st["v"] / (1 - b2 ** st["t"])
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_of(self, p: Tensor) -> dict | None:
        return self.state.get(id(p))
