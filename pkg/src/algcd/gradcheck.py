"""Central-difference gradient checker."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], Tensor], leaf: Tensor, step: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f().item()
        flat[i] = orig - step
        fm = f().item()
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    return out


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max over all leaf entries of ``|analytic - numeric| / max(1, |numeric|)``.

    ``f`` rebuilds the scalar from ``leaves`` on every call; leaves are
    perturbed in place and restored.
    """
    for leaf in leaves:
        if leaf.data.dtype != np.float64:
            raise TypeError("grad_check runs at 64-bit; convert leaves first")
        leaf.requires_grad = True
        leaf.grad = None
    f().backward()
    analytic = [leaf.grad.copy() for leaf in leaves]
    worst = 0.0
    for leaf, a in zip(leaves, analytic):
        n = numeric_grad(f, leaf, step)
        err = np.abs(a - n) / np.maximum(1.0, np.abs(n))
        worst = max(worst, float(err.max()))
    for leaf in leaves:
        leaf.grad = None
    return worst
