from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def cosine_lr(base: float, step: int, total: int, floor_frac: float = 1e-3) -> float:
    if total <= 1:
        return base
    lo = base * floor_frac
    return lo + 0.5 * (base - lo) * (1.0 + math.cos(math.pi * min(step, total) / total))


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient.

    ``lr_mult`` maps parameter names to a learning-rate multiplier; names in
    ``no_decay`` skip weight decay.
    """

    def __init__(self, named_params: list[tuple[str, Tensor]], momentum: float = 0.9,
                 weight_decay: float = 1e-4, lr_mult: dict | None = None, no_decay=()):
        names = [n for n, _ in named_params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {n: np.zeros_like(p.data) for n, p in self.params}
        self.lr_mult = dict(lr_mult or {})
        self.no_decay = set(no_decay)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if p.grad is None:
                continue
            wd = 0.0 if name in self.no_decay else self.weight_decay
            g = p.grad + wd * p.data if wd else p.grad
            buf = self.momentum * self.buffers[name] + g
            self.buffers[name] = buf
            p.data = p.data - lr * self.lr_mult.get(name, 1.0) * buf

    def state(self) -> dict[str, np.ndarray]:
        return dict(self.buffers)

    def load_state(self, buffers: dict[str, np.ndarray]) -> None:
        missing = set(self.buffers) - set(buffers)
        if missing:
            raise ValueError(f"optimizer state lacks buffers for {sorted(missing)}")
        for n in self.buffers:
            if buffers[n].shape != self.buffers[n].shape:
                raise ValueError(f"optimizer buffer {n} has shape {buffers[n].shape}")
            self.buffers[n] = np.array(buffers[n], dtype=np.float64)
