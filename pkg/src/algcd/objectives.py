"""Analogical, contrastive and prototype-classification losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.35
    eps: float = 1.0
    tau: float = 0.07
    tau_s: float = 0.07
    tau_t: float = 0.04
    tau_t_warmup_start: float = 0.07
    tau_t_warmup_epochs: int = 0

    def __post_init__(self):
        for name in ("tau", "tau_s", "tau_t", "tau_t_warmup_start"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")

    def teacher_temp(self, epoch: int) -> float:
        if self.tau_t_warmup_epochs <= 0 or epoch >= self.tau_t_warmup_epochs:
            return self.tau_t
        frac = epoch / self.tau_t_warmup_epochs
        return self.tau_t_warmup_start + frac * (self.tau_t - self.tau_t_warmup_start)


class PrototypeBank:
    """K learnable class prototypes, kept on the unit sphere after each step."""

    def __init__(self, num_classes: int, dim: int, seed: int = 0, data: np.ndarray | None = None):
        if data is None:
            data = np.random.default_rng(seed).standard_normal((num_classes, dim))
        data = data / np.linalg.norm(data, axis=1, keepdims=True)
        self.C = Tensor(data, requires_grad=True)

    @property
    def num_classes(self) -> int:
        return self.C.shape[0]

    def renormalize(self) -> None:
        self.C.data = self.C.data / np.linalg.norm(self.C.data, axis=1, keepdims=True)

    def named_parameters(self):
        return [("C", self.C)]

    def parameters(self):
        return [self.C]


def _const(x, like: Tensor | None = None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def analogical_loss(t_hat: Tensor, t_true) -> Tensor:
    """Mean of 1 - cos over rows; lies in [0, 2]."""
    return tn.sub(1.0, tn.mean(tn.cosine_similarity_rows(t_hat, _const(t_true))))


def view_pairing(n_views: int) -> np.ndarray:
    """Row i of a ``[view1; view2]`` stack pairs with row ``(i + B) mod 2B``."""
    if n_views % 2:
        raise ValueError("need an even number of view rows")
    b = n_views // 2
    return np.concatenate([np.arange(b, 2 * b), np.arange(b)])


def unsup_contrastive(f: Tensor, tau: float, pairing: np.ndarray | None = None) -> Tensor:
    """InfoNCE over 2B view embeddings; each anchor's denominator is every other row."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = f.shape[0]
    if n < 4:
        raise ValueError("unsup_contrastive needs B >= 2 samples (4 view rows)")
    pairing = view_pairing(n) if pairing is None else np.asarray(pairing)
    logits = tn.scale(tn.matmul(f, f.T), 1.0 / tau)
    others = ~np.eye(n, dtype=bool)
    pos = np.zeros((n, n))
    pos[np.arange(n), pairing] = 1.0
    lse = tn.logsumexp_rows(logits, others)
    pos_logit = tn.tsum(tn.mul(logits, Tensor(pos)), axis=1)
    return tn.mean(tn.sub(lse, pos_logit))


def sup_contrastive(f: Tensor, labels, tau: float) -> Tensor:
    """Supervised contrastive loss; positives are same-label rows other than the anchor."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    labels = np.asarray(labels)
    n = f.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"need one label per row, got {labels.shape} for {n} rows")
    others = ~np.eye(n, dtype=bool)
    same = (labels[:, None] == labels[None, :]) & others
    counts = same.sum(axis=1)
    if np.any(counts == 0):
        i = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"row {i} (label {labels[i]}) has no positive in the batch")
    logits = tn.scale(tn.matmul(f, f.T), 1.0 / tau)
    lse = tn.logsumexp_rows(logits, others)
    pos_mean = tn.tsum(tn.mul(logits, Tensor(same / counts[:, None])), axis=1)
    return tn.mean(tn.sub(lse, pos_mean))


def prototype_logits(f: Tensor, bank: PrototypeBank) -> Tensor:
    """Cosine similarity of every row of f with every prototype, B x K."""
    return tn.matmul(tn.l2_normalize_rows(f), tn.l2_normalize_rows(bank.C).T)


def prototype_posterior(f: Tensor, bank: PrototypeBank, tau_s: float) -> Tensor:
    if tau_s <= 0:
        raise ValueError("tau_s must be positive")
    return tn.softmax_rows(tn.scale(prototype_logits(f, bank), 1.0 / tau_s))


def sharpen(cos_logits: np.ndarray, tau_t: float) -> np.ndarray:
    """Teacher target: softmax at the sharpening temperature, no gradient."""
    z = np.asarray(cos_logits) / tau_t
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_distribution(p: np.ndarray, what: str) -> None:
    if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-6:
        raise ValueError(f"{what}: rows are not probability distributions")


def soft_cross_entropy(q: np.ndarray, p: Tensor) -> Tensor:
    """Mean over rows of ``-sum_k q_k log p_k`` with constant target q."""
    return tn.scale(tn.tsum(tn.mul(Tensor(q), tn.log(p))), -1.0 / p.shape[0])


def mean_entropy(p_rows: list[Tensor]) -> Tensor:
    """Entropy of the mean distribution over all given rows."""
    stacked = tn.concat(p_rows, axis=0)
    return tn.entropy(tn.mean(stacked, axis=0))


def cls_losses(p: Tensor, p_alt: Tensor, q: np.ndarray, q_alt: np.ndarray,
               labels=None, labeled_rows=None, eps: float = 1.0):
    """Self-distillation and supervised classification losses for two views.

    ``p``/``p_alt`` are the student posteriors of the two views; ``q``/``q_alt``
    are the matching sharpened teacher targets. Each view is taught by the
    other. Returns ``(L_cls_u, L_cls_s)``; ``L_cls_s`` is None without labels.
    """
    for arr, what in ((p.data, "p"), (p_alt.data, "p_alt"), (q, "q"), (q_alt, "q_alt")):
        _check_distribution(np.asarray(arr), what)
    ce = tn.scale(tn.add(soft_cross_entropy(q_alt, p), soft_cross_entropy(q, p_alt)), 0.5)
    l_u = tn.sub(ce, tn.scale(mean_entropy([p, p_alt]), eps)) if eps else ce
    l_s = None
    if labeled_rows is not None and len(labeled_rows):
        rows = np.asarray(labeled_rows)
        k = p.shape[1]
        onehot = np.eye(k)[np.asarray(labels)]
        both = tn.concat([tn.take_rows(p, rows), tn.take_rows(p_alt, rows)], axis=0)
        l_s = soft_cross_entropy(np.concatenate([onehot, onehot]), both)
    return l_u, l_s


def blend(l_u, l_s, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if l_s is None:
        return tn.scale(l_u, 1.0 - lam) if isinstance(l_u, Tensor) else (1.0 - lam) * l_u
    if isinstance(l_u, Tensor) or isinstance(l_s, Tensor):
        return tn.add(tn.scale(_const(l_u), 1.0 - lam), tn.scale(_const(l_s), lam))
    return (1.0 - lam) * l_u + lam * l_s


def total(l_rep, l_cls):
    return tn.add(l_rep, l_cls) if isinstance(l_rep, Tensor) else l_rep + l_cls
