"""Stage 1 (analogical training of the generator) and Stage 2 (GCD training).

Randomness is never drawn from a shared stream. Every draw comes from a
generator seeded by ``(seed, stage, epoch[, step])``, so a run resumed at any
step replays exactly the draws of the uninterrupted run.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from . import atcg as at
from . import blob
from . import kb as kbm
from . import objectives as ob
from . import tensor as tn
from .errors import ConfigError, DivergenceError, FormatError
from .optim import SGD, cosine_lr
from .synth import GcdDataset
from .tensor import Tensor

log = logging.getLogger(__name__)

STAGE_ATCG, STAGE_GCD = 1, 2


@dataclass(frozen=True)
class Stage1Config:
    rounds: int = 500
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    episode_ratio: float = 0.5
    n: int = 64
    m: Optional[int] = None
    scale_lr_mult: float = 15.0
    seed: int = 0

    def validate(self):
        if self.scale_lr_mult < 0:
            raise ConfigError("scale_lr_mult must be >= 0")
        if self.rounds <= 0 or self.lr < 0 or self.n <= 0:
            raise ConfigError("stage 1 needs rounds > 0, lr >= 0, n > 0")
        if not 0.0 < self.episode_ratio < 1.0:
            raise ConfigError("episode_ratio must lie in (0, 1)")


@dataclass(frozen=True)
class Stage2Config:
    epochs: int = 60
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    alpha: float = 0.4
    lam: float = 0.35
    eps: Optional[float] = None  # None: 2 on fine-grained synthetic data, else 1
    tau: float = 0.07
    tau_s: float = 0.07
    tau_t: float = 0.04
    tau_t_warmup_epochs: int = 0
    aug_sigma: float = 0.1
    num_views: int = 2
    freeze_atcg: bool = True
    precompute_text: bool = False
    seed: int = 0

    def validate(self):
        if self.epochs <= 0 or self.lr < 0 or self.batch_size < 2:
            raise ConfigError("stage 2 needs epochs > 0, lr >= 0, batch_size >= 2")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.num_views != 2:
            raise ConfigError("only two views per sample are supported")

    def resolved_eps(self, ds: GcdDataset) -> float:
        if self.eps is not None:
            return self.eps
        return 2.0 if ds.config is not None and ds.config.fine_grained else 1.0

    def loss_weights(self, ds: GcdDataset | None = None) -> ob.LossWeights:
        eps = self.eps if ds is None else self.resolved_eps(ds)
        return ob.LossWeights(lam=self.lam, eps=1.0 if eps is None else eps, tau=self.tau, tau_s=self.tau_s,
                              tau_t=self.tau_t, tau_t_warmup_epochs=self.tau_t_warmup_epochs)


def rng_for(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


def augment(v: np.ndarray, rng: np.random.Generator, sigma: float = 0.1) -> np.ndarray:
    """Embedding-space jitter: renormalised ``v + sigma * g / sqrt(d)``, g ~ N(0, I).

    The noise vector has expected norm about ``sigma`` whatever the dimension.
    """
    if sigma == 0:
        return np.array(v, copy=True)
    x = v + (sigma / math.sqrt(v.shape[-1])) * rng.standard_normal(v.shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# episodes


class Episode(NamedTuple):
    pseudo_known: tuple
    pseudo_unknown: tuple
    pseudo_labeled_idx: np.ndarray
    pseudo_unlabeled_idx: np.ndarray


def sample_episode(ds: GcdDataset, cfg: Stage1Config, round_idx: int) -> Episode:
    known = np.array(ds.known_classes)
    if known.size < 2:
        raise ValueError("an episode needs at least two known classes")
    rng = rng_for(cfg.seed, STAGE_ATCG, round_idx)
    n_unknown = min(max(int(round(cfg.episode_ratio * known.size)), 1), known.size - 1)
    perm = rng.permutation(known)
    p_unknown, p_known = np.sort(perm[:n_unknown]), np.sort(perm[n_unknown:])

    pool = ds.labeled_idx
    if cfg.n > pool.size:
        raise ValueError(f"n={cfg.n} exceeds the {pool.size} labeled samples")
    unl = np.sort(rng.choice(pool, size=cfg.n, replace=False))
    rest = np.setdiff1d(pool, unl)
    rest = rest[np.isin(ds.labels[rest], p_known)]
    if cfg.m is not None:
        if cfg.m > rest.size:
            raise ValueError(f"m={cfg.m} exceeds the {rest.size} remaining pseudo-known samples")
        rest = np.sort(rng.choice(rest, size=cfg.m, replace=False))
    if rest.size == 0:
        raise ValueError("episode has no pseudo-labeled samples left")
    ep = Episode(tuple(int(c) for c in p_known), tuple(int(c) for c in p_unknown), rest, unl)
    assert np.isin(ds.labels[ep.pseudo_labeled_idx], p_known).all()
    assert not np.intersect1d(ep.pseudo_labeled_idx, ep.pseudo_unlabeled_idx).size
    return ep


def episode_kb(ds: GcdDataset, ep: Episode) -> kbm.KnowledgeBase:
    idx = ep.pseudo_labeled_idx
    return kbm.from_rows(ds.visual[idx], ds.text_anchors, ds.labels[idx])


# ---------------------------------------------------------------------------
# checkpoints


def _arrays(prefix: str, named) -> dict[str, np.ndarray]:
    return {f"{prefix}.{n}": p.data for n, p in named}


def _restore(prefix: str, named, arrays: dict) -> None:
    for n, p in named:
        key = f"{prefix}.{n}"
        if key not in arrays:
            raise FormatError(f"checkpoint lacks parameter {key}")
        if arrays[key].shape != p.shape:
            raise ConfigError(f"parameter {key}: checkpoint shape {arrays[key].shape} vs model {p.shape}")
        p.data = np.array(arrays[key], dtype=np.float64)


def model_from_manifest(cfg: dict) -> at.AtcgModel:
    return at.AtcgModel(**cfg)


# ---------------------------------------------------------------------------
# stage 1


class AtcgTrainer:
    def __init__(self, ds: GcdDataset, model: at.AtcgModel, cfg: Stage1Config):
        cfg.validate()
        if not model.projections or not model.parameters():
            raise ValueError("nothing to optimize: the generator has no projections")
        if model.dim != ds.dim:
            raise ConfigError(f"model dim {model.dim} vs data dim {ds.dim}")
        self.ds, self.model, self.cfg = ds, model, cfg
        model.set_trainable(True)
        scales = [n for n, _ in model.named_parameters() if n.endswith("log_scale")]
        self.opt = SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay,
                       lr_mult={n: cfg.scale_lr_mult for n in scales}, no_decay=scales)
        self.round = 0
        self.trace: list[dict] = []

    def step(self) -> float:
        ds, cfg = self.ds, self.cfg
        ep = sample_episode(ds, cfg, self.round)
        kb = episode_kb(ds, ep)
        q = Tensor(ds.visual[ep.pseudo_unlabeled_idx])
        target = ds.text_anchors[ds.labels[ep.pseudo_unlabeled_idx]]
        self.opt.zero_grad()
        loss = ob.analogical_loss(at.atcg_forward(q, kb, self.model), target)
        if not math.isfinite(loss.item()):
            raise DivergenceError(f"stage 1 loss is {loss.item()} at round {self.round}")
        loss.backward()
        lr = cosine_lr(cfg.lr, self.round, cfg.rounds)
        self.opt.step(lr)
        self.trace.append({"step": self.round, "stage": "atcg", "L_AL": loss.item(), "lr": lr})
        self.round += 1
        return loss.item()

    def train(self, until: int | None = None) -> list[dict]:
        end = self.cfg.rounds if until is None else min(until, self.cfg.rounds)
        while self.round < end:
            self.step()
            if self.round % 100 == 0:
                log.info("stage 1 round %d  L_AL %.4f", self.round, self.trace[-1]["L_AL"])
        return self.trace

    def save(self, path) -> None:
        manifest = {"kind": "checkpoint", "stage": "atcg", "round": self.round,
                    "dim": self.ds.dim, "atcg": self.model.config(), "stage1": asdict(self.cfg),
                    "trace": self.trace}
        arrays = _arrays("atcg", self.model.named_parameters())
        arrays.update({f"opt.{k}": v for k, v in self.opt.state().items()})
        blob.write_bundle(path, manifest, arrays)

    @classmethod
    def resume(cls, path, ds: GcdDataset) -> "AtcgTrainer":
        manifest, arrays = _read_checkpoint(path, "atcg", ds)
        model = model_from_manifest(manifest["atcg"])
        _restore("atcg", model.named_parameters(), arrays)
        tr = cls(ds, model, Stage1Config(**manifest["stage1"]))
        tr.opt.load_state({k[4:]: v for k, v in arrays.items() if k.startswith("opt.")})
        tr.round = manifest["round"]
        tr.trace = manifest["trace"]
        return tr


def train_atcg(ds: GcdDataset, model: at.AtcgModel, cfg: Stage1Config):
    tr = AtcgTrainer(ds, model, cfg)
    return tr.model, tr.train()


def _read_checkpoint(path, stage: str, ds: GcdDataset | None):
    if not Path(path, "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    manifest, arrays = blob.read_bundle(path)
    if manifest.get("kind") != "checkpoint":
        raise FormatError(f"{path} is not a checkpoint")
    if manifest.get("stage") != stage:
        raise ConfigError(f"{path} holds a {manifest.get('stage')!r} checkpoint, expected {stage!r}")
    if ds is not None and manifest["dim"] != ds.dim:
        raise ConfigError(f"checkpoint dim {manifest['dim']} does not match data dim {ds.dim}")
    return manifest, arrays


def load_atcg(path, ds: GcdDataset | None = None) -> at.AtcgModel:
    """Generator weights from a stage-1 checkpoint (or the generator inside a stage-2 one)."""
    manifest, arrays = blob.read_bundle(path)
    if manifest.get("kind") != "checkpoint" or manifest.get("atcg") is None:
        raise ConfigError(f"{path} carries no trained generator")
    if ds is not None and manifest["dim"] != ds.dim:
        raise ConfigError(f"checkpoint dim {manifest['dim']} does not match data dim {ds.dim}")
    model = model_from_manifest(manifest["atcg"])
    _restore("atcg", model.named_parameters(), arrays)
    return model


# ---------------------------------------------------------------------------
# stage 2

TRACE_FIELDS = ("step", "stage", "epoch", "L_rep_u", "L_rep_s", "L_cls_u", "L_cls_s", "total", "lr")


class GcdTrainer:
    """Fusion head + prototype training on top of an (optional) trained generator.

    ``model=None`` is the no-generator baseline: fused input is the visual
    embedding itself.
    """

    def __init__(self, ds: GcdDataset, model: Optional[at.AtcgModel], head: at.FusionHead,
                 bank: ob.PrototypeBank, cfg: Stage2Config, kb: kbm.KnowledgeBase | None = None):
        cfg.validate()
        if head.in_dim != ds.dim:
            raise ConfigError(f"head input {head.in_dim} vs data dim {ds.dim}")
        if model is not None and model.dim != ds.dim:
            raise ConfigError(f"model dim {model.dim} vs data dim {ds.dim}")
        self.ds, self.model, self.head, self.bank, self.cfg = ds, model, head, bank, cfg
        self.kb = kb if kb is not None else (kbm.build(ds) if model is not None else None)
        self.weights = cfg.loss_weights(ds)
        self.train_atcg = model is not None and not cfg.freeze_atcg and bool(model.parameters())
        if model is not None:
            model.set_trainable(self.train_atcg)
        named = [(f"head.{n}", p) for n, p in head.named_parameters()]
        named += [(f"bank.{n}", p) for n, p in bank.named_parameters()]
        if self.train_atcg:
            named += [(f"atcg.{n}", p) for n, p in model.named_parameters()]
        self.opt = SGD(named, cfg.momentum, cfg.weight_decay)
        self.steps_per_epoch = ds.visual.shape[0] // cfg.batch_size
        if self.steps_per_epoch == 0:
            raise ConfigError("batch_size exceeds the dataset")
        self.total_steps = self.steps_per_epoch * cfg.epochs
        self.global_step = 0
        self.trace: list[dict] = []
        self._epoch_cache: tuple | None = None

    # -- data -----------------------------------------------------------

    def _epoch_batches(self, epoch: int) -> list[np.ndarray]:
        perm = rng_for(self.cfg.seed, STAGE_GCD, epoch).permutation(self.ds.visual.shape[0])
        b = self.cfg.batch_size
        return [perm[i * b:(i + 1) * b] for i in range(self.steps_per_epoch)]

    def _views(self, epoch: int, s: int, idx: np.ndarray):
        rng = rng_for(self.cfg.seed, STAGE_GCD, epoch, s)
        v = self.ds.visual[idx]
        return augment(v, rng, self.cfg.aug_sigma), augment(v, rng, self.cfg.aug_sigma)

    def _frozen_text(self, views: np.ndarray) -> np.ndarray:
        return at.generate_text(self.model, self.kb, views, chunk=views.shape[0])

    def _precomputed(self, epoch: int):
        if self._epoch_cache is None or self._epoch_cache[0] != epoch:
            batches = self._epoch_batches(epoch)
            texts = []
            for s, idx in enumerate(batches):
                v1, v2 = self._views(epoch, s, idx)
                texts.append((self._frozen_text(v1), self._frozen_text(v2)))
            self._epoch_cache = (epoch, texts)
        return self._epoch_cache[1]

    # -- forward --------------------------------------------------------

    def _embed(self, v: np.ndarray, t_frozen: np.ndarray | None) -> Tensor:
        vt = Tensor(v)
        if self.model is None:
            h = vt
        else:
            if self.train_atcg:
                t = at.atcg_forward(vt, self.kb, self.model)
            else:
                t = Tensor(t_frozen if t_frozen is not None else self._frozen_text(v))
            h = at.fuse(vt, t, self.cfg.alpha)
        return at.fusion_head(h, self.head)

    def losses(self, epoch: int, s: int, idx: np.ndarray):
        cfg, w = self.cfg, self.weights
        v1, v2 = self._views(epoch, s, idx)
        t1 = t2 = None
        if self.model is not None and not self.train_atcg and cfg.precompute_text:
            t1, t2 = self._precomputed(epoch)[s]
        f1, f2 = self._embed(v1, t1), self._embed(v2, t2)

        l_rep_u = ob.unsup_contrastive(tn.concat([f1, f2], axis=0), w.tau)
        lab_rows = np.flatnonzero(self.ds.labeled_mask[idx])
        lab_y = self.ds.labels[idx][lab_rows]
        l_rep_s = None
        if lab_rows.size:
            fl = tn.concat([tn.take_rows(f1, lab_rows), tn.take_rows(f2, lab_rows)], axis=0)
            l_rep_s = ob.sup_contrastive(fl, np.concatenate([lab_y, lab_y]), w.tau)

        c1, c2 = ob.prototype_logits(f1, self.bank), ob.prototype_logits(f2, self.bank)
        p1 = tn.softmax_rows(tn.scale(c1, 1.0 / w.tau_s))
        p2 = tn.softmax_rows(tn.scale(c2, 1.0 / w.tau_s))
        tau_t = w.teacher_temp(epoch)
        q1, q2 = ob.sharpen(c1.data, tau_t), ob.sharpen(c2.data, tau_t)
        l_cls_u, l_cls_s = ob.cls_losses(p1, p2, q1, q2, lab_y, lab_rows, w.eps)

        l_rep = ob.blend(l_rep_u, l_rep_s, w.lam)
        l_cls = ob.blend(l_cls_u, l_cls_s, w.lam)
        parts = {"L_rep_u": l_rep_u, "L_rep_s": l_rep_s, "L_cls_u": l_cls_u, "L_cls_s": l_cls_s}
        return ob.total(l_rep, l_cls), parts

    def step(self) -> dict:
        epoch, s = divmod(self.global_step, self.steps_per_epoch)
        idx = self._epoch_batches(epoch)[s]
        loss, parts = self.losses(epoch, s, idx)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"stage 2 loss is {value} at step {self.global_step}")
        self.opt.zero_grad()
        loss.backward()
        lr = cosine_lr(self.cfg.lr, self.global_step, self.total_steps)
        self.opt.step(lr)
        self.bank.renormalize()
        row = {"step": self.global_step, "stage": "gcd", "epoch": epoch,
               **{k: (float("nan") if v is None else v.item()) for k, v in parts.items()},
               "total": value, "lr": lr}
        self.trace.append(row)
        self.global_step += 1
        return row

    def train(self, until_step: int | None = None) -> list[dict]:
        end = self.total_steps if until_step is None else min(until_step, self.total_steps)
        while self.global_step < end:
            row = self.step()
            if self.global_step % self.steps_per_epoch == 0:
                log.debug("stage 2 epoch %d  loss %.4f", row["epoch"], row["total"])
        return self.trace

    def epoch_means(self) -> np.ndarray:
        tot = np.array([r["total"] for r in self.trace])
        n = len(tot) // self.steps_per_epoch
        return tot[: n * self.steps_per_epoch].reshape(n, self.steps_per_epoch).mean(axis=1)

    # -- persistence ----------------------------------------------------

    def save(self, path) -> None:
        manifest = {"kind": "checkpoint", "stage": "gcd", "global_step": self.global_step,
                    "dim": self.ds.dim, "stage2": asdict(self.cfg), "head": self.head.config(),
                    "num_classes": self.bank.num_classes,
                    "atcg": self.model.config() if self.model is not None else None,
                    "trace": self.trace}
        arrays = _arrays("head", self.head.named_parameters())
        arrays.update(_arrays("bank", self.bank.named_parameters()))
        if self.model is not None and self.model.parameters():
            arrays.update(_arrays("atcg", self.model.named_parameters()))
        arrays.update({f"opt.{k}": v for k, v in self.opt.state().items()})
        blob.write_bundle(path, manifest, arrays)

    @classmethod
    def resume(cls, path, ds: GcdDataset) -> "GcdTrainer":
        manifest, arrays = _read_checkpoint(path, "gcd", ds)
        cfg = Stage2Config(**manifest["stage2"])
        model = None
        if manifest["atcg"] is not None:
            model = model_from_manifest(manifest["atcg"])
            _restore("atcg", model.named_parameters(), arrays)
        head = at.FusionHead(**manifest["head"])
        _restore("head", head.named_parameters(), arrays)
        bank = ob.PrototypeBank(manifest["num_classes"], head.out_dim, data=arrays["bank.C"])
        bank.C.data = np.array(arrays["bank.C"], dtype=np.float64)
        tr = cls(ds, model, head, bank, cfg)
        tr.opt.load_state({k[4:]: v for k, v in arrays.items() if k.startswith("opt.")})
        tr.global_step = manifest["global_step"]
        tr.trace = manifest["trace"]
        return tr


def train_gcd(ds, model, head, bank, cfg: Stage2Config, kb=None):
    tr = GcdTrainer(ds, model, head, bank, cfg, kb)
    tr.train()
    return tr


def write_trace_csv(trace: list[dict], path) -> None:
    if not trace:
        Path(path).write_text("")
        return
    fields = list(trace[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in trace:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
