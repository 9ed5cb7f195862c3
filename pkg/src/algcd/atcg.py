"""Analogical Textual Concept Generator and the fusion head.

Rows are embeddings, so a projection is ``x @ W``. Every attention block may
carry query/key/value/output projections; with ``projections=False`` the
blocks are parameter-free and compute the plain attention formulas:

* initial TIAA: ``softmax(v K^T / sqrt(d)) T`` over KB visual keys K and
  text values T;
* TSA: single-token self-attention of the current text estimate;
* stacked TIAA: query ``[t, v]``, keys ``[T, K]`` (feature concat),
  temperature ``sqrt(2d)``, values T.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import DimensionError
from .kb import KnowledgeBase
from .tensor import Tensor

PROJ_NAMES = ("wq", "wk", "wv", "wo")


def _init_proj(rng: np.random.Generator, n: int, noise: float) -> Tensor:
    w = np.eye(n)
    if noise > 0:
        w = w + noise * rng.standard_normal((n, n))
    return Tensor(w, requires_grad=True)


def _maybe(x: Tensor, w: Tensor | None) -> Tensor:
    return x if w is None else tn.matmul(x, w)


@dataclass
class AtcgModel:
    dim: int
    num_stacked: int = 2
    projections: bool = True
    init_noise: float = 0.02
    seed: int = 0
    initial: dict = field(default_factory=dict, repr=False)
    stacked: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.num_stacked < 0:
            raise ValueError("num_stacked must be >= 0")
        if self.initial or self.stacked or not self.projections:
            return
        rng = np.random.default_rng(self.seed)
        d = self.dim
        self.initial = {k: _init_proj(rng, d, self.init_noise) for k in PROJ_NAMES}
        self.initial["log_scale"] = Tensor(np.zeros(()), requires_grad=True)
        for _ in range(self.num_stacked):
            tsa = {k: _init_proj(rng, d, self.init_noise) for k in PROJ_NAMES}
            tiaa = {"wq": _init_proj(rng, 2 * d, self.init_noise),
                    "wk": _init_proj(rng, 2 * d, self.init_noise),
                    "wv": _init_proj(rng, d, self.init_noise),
                    "wo": _init_proj(rng, d, self.init_noise),
                    "log_scale": Tensor(np.zeros(()), requires_grad=True)}
            self.stacked.append({"tsa": tsa, "tiaa": tiaa})

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"initial.{k}", v) for k, v in sorted(self.initial.items())]
        for i, layer in enumerate(self.stacked):
            for block in ("tsa", "tiaa"):
                out += [(f"stacked.{i}.{block}.{k}", v) for k, v in sorted(layer[block].items())]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def _block(self, where: str, i: int | None = None, block: str | None = None) -> dict:
        if not self.projections:
            return {}
        return self.initial if where == "initial" else self.stacked[i][block]

    def config(self) -> dict:
        return {"dim": self.dim, "num_stacked": self.num_stacked, "projections": self.projections,
                "init_noise": self.init_noise, "seed": self.seed}


def _check_query(vq: Tensor, kb: KnowledgeBase) -> None:
    if vq.ndim != 2 or vq.shape[1] != kb.dim:
        raise DimensionError(f"query {vq.shape} does not match knowledge base dim {kb.dim}")


def _topk_mask(logits: np.ndarray, kb: KnowledgeBase):
    if kb.mode != "topk" or kb.topk >= logits.shape[1]:
        return None
    k = kb.topk
    part = np.argpartition(-logits, k - 1, axis=1)[:, :k]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, part, True, axis=1)
    return mask


def _attend(q: Tensor, k: Tensor, v: Tensor, temp: float, kb: KnowledgeBase,
            log_scale: Tensor | None = None):
    logits = tn.scale(tn.matmul(q, k.T), 1.0 / temp)
    if log_scale is not None:
        logits = tn.mul(tn.exp(log_scale), logits)
    w = tn.softmax_rows(logits, _topk_mask(logits.data, kb))
    return tn.matmul(w, v), w.data


def tiaa_initial(vq: Tensor, kb: KnowledgeBase, params: dict | None = None):
    """Initial analogical text estimate; returns (output B x d, attention B x L)."""
    _check_query(vq, kb)
    params = params or {}
    keys, vals = Tensor(kb.visual_keys), Tensor(kb.text_values)
    q = _maybe(vq, params.get("wq"))
    k = _maybe(keys, params.get("wk"))
    v = _maybe(vals, params.get("wv"))
    out, w = _attend(q, k, v, math.sqrt(kb.dim), kb, params.get("log_scale"))
    return _maybe(out, params.get("wo")), w


def tsa(t: Tensor, params: dict | None = None) -> Tensor:
    """Text self-attention over a single token per row."""
    params = params or {}
    if t.ndim != 2:
        raise DimensionError(f"tsa expects B x d, got {t.shape}")
    if "wq" in params and params["wq"].shape[0] != t.shape[1]:
        raise DimensionError(f"tsa projections are {params['wq'].shape}, input {t.shape}")
    q = _maybe(t, params.get("wq"))
    k = _maybe(t, params.get("wk"))
    v = _maybe(t, params.get("wv"))
    logits = tn.scale(tn.row_dot(q, k), 1.0 / math.sqrt(t.shape[1]))
    w = tn.softmax_rows(logits)
    return _maybe(tn.row_scale(v, w), params.get("wo"))


def tiaa_stacked(t_tsa: Tensor, vq: Tensor, kb: KnowledgeBase, params: dict | None = None):
    """Refined estimate with concatenated [text, visual] queries and keys."""
    _check_query(vq, kb)
    if t_tsa.shape != vq.shape:
        raise DimensionError(f"text estimate {t_tsa.shape} and query {vq.shape} differ")
    params = params or {}
    vals = Tensor(kb.text_values)
    q = _maybe(tn.concat([t_tsa, vq], axis=1), params.get("wq"))
    k = _maybe(Tensor(np.concatenate([kb.text_values, kb.visual_keys], axis=1)), params.get("wk"))
    v = _maybe(vals, params.get("wv"))
    out, w = _attend(q, k, v, math.sqrt(2 * kb.dim), kb, params.get("log_scale"))
    return _maybe(out, params.get("wo")), w


def atcg_forward(vq: Tensor, kb: KnowledgeBase, model: AtcgModel, return_weights: bool = False):
    if model.dim != kb.dim:
        raise DimensionError(f"model dim {model.dim} vs knowledge base dim {kb.dim}")
    t, w = tiaa_initial(vq, kb, model._block("initial"))
    weights = [w]
    for i in range(model.num_stacked):
        t = tsa(t, model._block("stacked", i, "tsa"))
        t, w = tiaa_stacked(t, vq, kb, model._block("stacked", i, "tiaa"))
        weights.append(w)
    return (t, weights) if return_weights else t


def generate_text(model: AtcgModel, kb: KnowledgeBase, visual: np.ndarray, chunk: int = 512) -> np.ndarray:
    """No-grad batched forward; rows are independent."""
    params = model.parameters()
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        out = [atcg_forward(Tensor(visual[i:i + chunk]), kb, model).data for i in range(0, len(visual), chunk)]
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s
    return np.concatenate(out, axis=0)


def fuse(v: Tensor, t: Tensor, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if v.shape != t.shape:
        raise DimensionError(f"fuse: visual {v.shape} vs text {t.shape}")
    return tn.add(tn.scale(v, alpha), tn.scale(t, 1.0 - alpha))


@dataclass
class FusionHead:
    in_dim: int = 64
    hidden: int = 256
    out_dim: int = 64
    seed: int = 0
    w1: Tensor = field(default=None, repr=False)
    b1: Tensor = field(default=None, repr=False)
    w2: Tensor = field(default=None, repr=False)
    b2: Tensor = field(default=None, repr=False)

    def __post_init__(self):
        if self.w1 is not None:
            return
        rng = np.random.default_rng(self.seed)
        self.w1 = Tensor(rng.standard_normal((self.in_dim, self.hidden)) * math.sqrt(2.0 / self.in_dim),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros((1, self.hidden)), requires_grad=True)
        self.w2 = Tensor(rng.standard_normal((self.hidden, self.out_dim)) * math.sqrt(1.0 / self.hidden),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros((1, self.out_dim)), requires_grad=True)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def config(self) -> dict:
        return {"in_dim": self.in_dim, "hidden": self.hidden, "out_dim": self.out_dim, "seed": self.seed}


def fusion_head(h: Tensor, head: FusionHead) -> Tensor:
    if h.ndim != 2 or h.shape[1] != head.in_dim:
        raise DimensionError(f"fusion head expects B x {head.in_dim}, got {h.shape}")
    z = tn.gelu(tn.add(tn.matmul(h, head.w1), head.b1))
    return tn.l2_normalize_rows(tn.add(tn.matmul(z, head.w2), head.b2))
