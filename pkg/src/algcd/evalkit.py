"""GCD evaluation: Hungarian-matched All/Old/New accuracy and the two hosts."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import atcg as at
from . import kb as kbm
from . import objectives as ob
from . import trainer as tr
from .synth import GcdDataset
from .tensor import Tensor

CSV_FIELDS = ("host", "all_acc", "old_acc", "new_acc", "K_used", "n_old", "n_new", "seed")


def hungarian(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost assignment. Returns ``perm`` (row i -> column perm[i]) and the total cost.

    Rectangular inputs are zero-padded to square; padded rows/columns are
    dropped from ``perm`` (entries pointing at padding are -1).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    r, c = cost.shape
    n = max(r, c)
    sq = np.zeros((n, n))
    sq[:r, :c] = cost
    rows, cols = linear_sum_assignment(sq)
    perm = np.where(cols[:r] < c, cols[:r], -1)
    total = float(sum(cost[i, perm[i]] for i in range(r) if perm[i] >= 0))
    return perm, total


@dataclass
class MetricsReport:
    all_acc: float
    old_acc: float
    new_acc: float
    K_used: int
    host: str = "parametric"
    n_old: int = 0
    n_new: int = 0
    seed: Optional[int] = None
    config: dict = field(default_factory=dict)
    mapping: dict = field(default_factory=dict, repr=False)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_FIELDS}


def write_report_csv(reports: list[MetricsReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.csv_row())


def gcd_accuracy(pred, truth, known_classes, host: str = "parametric") -> MetricsReport:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions for {truth.size} labels")
    if pred.size == 0:
        raise ValueError("nothing to evaluate")
    clusters, pi = np.unique(pred, return_inverse=True)
    classes, ti = np.unique(truth, return_inverse=True)
    w = np.zeros((clusters.size, classes.size), dtype=np.int64)
    np.add.at(w, (pi, ti), 1)
    # Rows in a canonical order (by count profile) so tied optima resolve the
    # same way whatever ids the clusters carry.
    order = np.lexsort(w.T[::-1])
    perm_c, _ = hungarian(w.max() - w[order])
    perm = np.full(clusters.size, -1)
    perm[order] = perm_c
    matched = np.where(perm >= 0, classes[np.clip(perm, 0, None)], -1)
    hit = matched[pi] == truth
    old = np.isin(truth, list(known_classes))
    n_old, n_new = int(old.sum()), int((~old).sum())
    return MetricsReport(
        all_acc=float(hit.mean()),
        old_acc=float(hit[old].mean()) if n_old else float("nan"),
        new_acc=float(hit[~old].mean()) if n_new else float("nan"),
        K_used=int(clusters.size), host=host, n_old=n_old, n_new=n_new,
        mapping={int(c): int(m) for c, m in zip(clusters, matched) if m >= 0})


# ---------------------------------------------------------------------------
# hosts


def fused_embeddings(ds: GcdDataset, model, head: at.FusionHead, alpha: float,
                     rows: np.ndarray | None = None, kb: kbm.KnowledgeBase | None = None) -> np.ndarray:
    """Fusion-head output for the chosen rows, no augmentation, no graph."""
    v = ds.visual if rows is None else ds.visual[rows]
    saved = [p.requires_grad for p in head.parameters()]
    for p in head.parameters():
        p.requires_grad = False
    try:
        if model is None:
            h = Tensor(v)
        else:
            t = at.generate_text(model, kb if kb is not None else kbm.build(ds), v)
            h = at.fuse(Tensor(v), Tensor(t), alpha)
        return at.fusion_head(h, head).data
    finally:
        for p, s in zip(head.parameters(), saved):
            p.requires_grad = s


def eval_parametric(ds: GcdDataset, model, head: at.FusionHead, bank: ob.PrototypeBank,
                    alpha: float, kb=None, seed=None) -> MetricsReport:
    rows = ds.unlabeled_idx
    f = fused_embeddings(ds, model, head, alpha, rows, kb)
    c = bank.C.data / np.linalg.norm(bank.C.data, axis=1, keepdims=True)
    pred = np.argmax(f @ c.T, axis=1)  # ties -> lowest index
    rep = gcd_accuracy(pred, ds.labels[rows], ds.known_classes, host="parametric")
    rep.seed = seed
    rep.config = {"alpha": alpha, "K": bank.num_classes}
    return rep


class KMeansResult:
    def __init__(self, labels, centers, objective_trace, restarts):
        self.labels = labels
        self.centers = centers
        self.objective_trace = objective_trace
        self.restarts = restarts


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def _kmeanspp(x: np.ndarray, fixed: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Cosine-distance k-means++ continuing from the ``fixed`` centres."""
    centers = list(fixed)
    if not centers:
        centers.append(x[rng.integers(x.shape[0])])
        k -= 1
    for _ in range(k):
        d = np.clip(1.0 - (x @ np.array(centers).T).max(axis=1), 0.0, None)
        probs = d / d.sum() if d.sum() > 0 else np.full(x.shape[0], 1.0 / x.shape[0])
        centers.append(x[rng.choice(x.shape[0], p=probs)])
    return np.array(centers)


def semi_supervised_kmeans(x: np.ndarray, labeled: np.ndarray, labels: np.ndarray, K: int,
                           seed: int = 0, max_iter: int = 100, max_restarts: int = 10) -> KMeansResult:
    """Spherical Lloyd iterations with labeled rows pinned to their class cluster.

    Known class c owns cluster c; the remaining clusters are seeded by
    k-means++ over the unlabeled rows. The objective is ``sum(1 - x.c)``
    with unit centres, which each half-step can only lower.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    x = _unit_rows(np.asarray(x, dtype=np.float64))
    classes = np.unique(labels[labeled])
    if classes.size and (classes.max() >= K):
        raise ValueError(f"labeled class ids must be < K={K}")
    unl = np.setdiff1d(np.arange(x.shape[0]), labeled)
    free = np.setdiff1d(np.arange(K), classes)
    for attempt in range(max_restarts):
        rng = np.random.default_rng([seed, attempt])
        centers = np.zeros((K, x.shape[1]))
        for c in classes:
            centers[c] = x[labeled[labels[labeled] == c]].mean(axis=0)
        centers[classes] = _unit_rows(centers[classes])
        if free.size:
            centers[free] = _kmeanspp(x[unl], centers[classes], free.size, rng)[classes.size:]
        assign = np.empty(x.shape[0], dtype=np.int64)
        assign[labeled] = labels[labeled]
        trace, prev = [], None
        empty = False
        for _ in range(max_iter):
            assign[unl] = np.argmax(x[unl] @ centers.T, axis=1)
            trace.append(float((1.0 - (x * centers[assign]).sum(axis=1)).sum()))
            counts = np.bincount(assign, minlength=K)
            if (counts == 0).any():
                empty = True
                break
            sums = np.zeros_like(centers)
            np.add.at(sums, assign, x)
            centers = _unit_rows(sums)
            trace.append(float((1.0 - (x * centers[assign]).sum(axis=1)).sum()))
            if prev is not None and np.array_equal(prev, assign):
                break
            prev = assign.copy()
        if not empty:
            return KMeansResult(assign, centers, trace, attempt)
    raise RuntimeError(f"k-means hit an empty cluster on {max_restarts} restarts")


def eval_kmeans(ds: GcdDataset, model, head: at.FusionHead, alpha: float, K: int | None = None,
                seed: int = 0, kb=None) -> MetricsReport:
    K = ds.num_classes if K is None else int(K)
    if K < 2:
        raise ValueError("K must be >= 2")
    f = fused_embeddings(ds, model, head, alpha, None, kb)
    res = semi_supervised_kmeans(f, ds.labeled_idx, ds.labels, K, seed=seed)
    rows = ds.unlabeled_idx
    rep = gcd_accuracy(res.labels[rows], ds.labels[rows], ds.known_classes, host="kmeans")
    rep.seed = seed
    rep.config = {"alpha": alpha, "K": K}
    return rep


# ---------------------------------------------------------------------------
# full runs and ablations

ABLATION_FIELDS = ("setting", "seed", "all", "old", "new")


def make_kb(ds: GcdDataset, section) -> kbm.KnowledgeBase:
    kb = kbm.build(ds)
    if section.kb_mode == "class_prototype":
        return kbm.as_prototypes(kb)
    if section.kb_mode == "topk":
        return kbm.with_topk(kb, section.kb_topk)
    return kb


def stage1_model(ds: GcdDataset, cfg, seed: int, num_stacked: int | None = None):
    """Build and (if it has parameters) train a generator for one seed."""
    a = cfg.atcg
    model = at.AtcgModel(ds.dim, a.num_stacked if num_stacked is None else num_stacked,
                         projections=a.projections, init_noise=a.init_noise, seed=seed)
    if model.parameters():
        tr.train_atcg(ds, model, replace(cfg.train_stage1, seed=seed))
    return model


def run_setting(ds: GcdDataset, cfg, seed: int, alpha: float | None = None, model=None,
                use_atcg: bool = True, num_stacked: int | None = None):
    """Stage 2 plus evaluation for one seed; returns (report, trainer).

    ``use_atcg=False`` is the visual-only baseline. A trained ``model`` may
    be passed in to share one stage-1 run across several settings.
    """
    if use_atcg and model is None:
        model = stage1_model(ds, cfg, seed, num_stacked)
    if not use_atcg:
        model = None
    s2 = replace(cfg.train_stage2, seed=seed, **({} if alpha is None else {"alpha": alpha}))
    head = at.FusionHead(ds.dim, cfg.atcg.head_hidden, cfg.atcg.head_out, seed=seed)
    bank = ob.PrototypeBank(ds.num_classes, cfg.atcg.head_out, seed=seed)
    kb = make_kb(ds, cfg.atcg) if model is not None else None
    trainer = tr.train_gcd(ds, model, head, bank, s2, kb)
    if cfg.eval.host == "kmeans":
        rep = eval_kmeans(ds, model, head, s2.alpha, cfg.eval.K, seed=seed, kb=kb)
    else:
        rep = eval_parametric(ds, model, head, bank, s2.alpha, kb=kb, seed=seed)
    return rep, trainer


@dataclass
class AblationRow:
    setting: str
    seed: int
    all: float
    old: float
    new: float


def ablate(ds: GcdDataset, cfg, axis: str, seeds=None, log=None) -> list[AblationRow]:
    """One run per setting per seed along ``axis`` (layers, alpha or components)."""
    seeds = list(cfg.ablate.seeds if seeds is None else seeds)
    alpha = cfg.train_stage2.alpha
    rows = []

    def add(setting, seed, rep):
        rows.append(AblationRow(str(setting), seed, rep.all_acc, rep.old_acc, rep.new_acc))
        if log:
            log(f"{axis}={setting} seed={seed} all={rep.all_acc:.4f} old={rep.old_acc:.4f} new={rep.new_acc:.4f}")

    for seed in seeds:
        if axis == "layers":
            for n in cfg.ablate.layers:
                add(n, seed, run_setting(ds, cfg, seed, alpha, num_stacked=n)[0])
        elif axis == "alpha":
            model = stage1_model(ds, cfg, seed)
            for a in cfg.ablate.alphas:
                add(f"{a:.1f}", seed, run_setting(ds, cfg, seed, a, model=model)[0])
        elif axis == "components":
            for comp in cfg.ablate.components:
                if comp == "none":
                    rep = run_setting(ds, cfg, seed, 1.0, use_atcg=False)[0]
                else:
                    rep = run_setting(ds, cfg, seed, alpha, num_stacked=0 if comp == "initial" else None)[0]
                add(comp, seed, rep)
        else:
            raise ValueError(f"unknown ablation axis {axis!r}")
    return rows


def summarize(rows: list[AblationRow]) -> list[dict]:
    """Mean and standard deviation per setting, in first-seen order."""
    order = list(dict.fromkeys(r.setting for r in rows))
    out = []
    for s in order:
        sel = [r for r in rows if r.setting == s]
        d = {"setting": s, "runs": len(sel)}
        for m in ("all", "old", "new"):
            v = np.array([getattr(r, m) for r in sel])
            d[f"{m}_mean"] = float(v.mean())
            d[f"{m}_std"] = float(v.std())
        out.append(d)
    return out


def write_ablation_csv(rows: list[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_FIELDS)
        for r in rows:
            w.writerow([r.setting, r.seed, repr(r.all), repr(r.old), repr(r.new)])


def write_summary_csv(summary: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0].keys()))
        w.writeheader()
        w.writerows(summary)
