"""Visual-textual knowledge base built from labeled samples."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blob
from .errors import DegenerateVectorError, FormatError
from .synth import GcdDataset

MODES = ("full", "class_prototype", "topk")


@dataclass(frozen=True)
class KnowledgeBase:
    visual_keys: np.ndarray
    text_values: np.ndarray
    class_ids: np.ndarray
    mode: str = "full"
    topk: int | None = None

    def __post_init__(self):
        if self.visual_keys.shape != self.text_values.shape:
            raise FormatError(f"keys {self.visual_keys.shape} and values {self.text_values.shape} differ")
        if self.class_ids.shape != (self.visual_keys.shape[0],):
            raise FormatError("class_ids must have one entry per row")
        if self.visual_keys.shape[0] == 0:
            raise FormatError("knowledge base is empty")
        if self.mode not in MODES:
            raise FormatError(f"unknown mode {self.mode!r}")
        if self.mode == "topk" and not (self.topk and self.topk >= 1):
            raise FormatError("topk mode needs topk >= 1")

    def __len__(self) -> int:
        return self.visual_keys.shape[0]

    @property
    def dim(self) -> int:
        return self.visual_keys.shape[1]

    def permuted(self, perm) -> "KnowledgeBase":
        perm = np.asarray(perm)
        return KnowledgeBase(self.visual_keys[perm], self.text_values[perm], self.class_ids[perm],
                             self.mode, self.topk)

    def equals(self, other: "KnowledgeBase") -> bool:
        return (self.mode == other.mode and self.topk == other.topk
                and np.array_equal(self.visual_keys, other.visual_keys)
                and np.array_equal(self.text_values, other.text_values)
                and np.array_equal(self.class_ids, other.class_ids))


def from_rows(visual: np.ndarray, text_anchors: np.ndarray, labels: np.ndarray) -> KnowledgeBase:
    labels = np.asarray(labels, dtype=np.int64)
    return KnowledgeBase(np.array(visual, dtype=np.float64), np.array(text_anchors[labels], dtype=np.float64),
                         labels.copy())


def build(ds: GcdDataset) -> KnowledgeBase:
    idx = ds.labeled_idx
    if idx.size == 0:
        raise ValueError("cannot build a knowledge base: dataset has no labeled samples")
    return from_rows(ds.visual[idx], ds.text_anchors, ds.labels[idx])


def as_prototypes(kb: KnowledgeBase) -> KnowledgeBase:
    """One row per class: normalised mean visual key, the class text value."""
    if kb.mode == "class_prototype":
        return kb
    if kb.mode != "full":
        raise ValueError(f"as_prototypes needs a full knowledge base, got mode {kb.mode!r}")
    classes = np.unique(kb.class_ids)
    keys, vals = [], []
    for c in classes:
        rows = kb.class_ids == c
        m = kb.visual_keys[rows].mean(axis=0)
        n = np.linalg.norm(m)
        if n <= 1e-12:
            raise DegenerateVectorError(f"class {int(c)} visual keys average to zero", row=int(c))
        keys.append(m / n)
        vals.append(kb.text_values[rows][0])
    return KnowledgeBase(np.array(keys), np.array(vals), classes.astype(np.int64), "class_prototype")


def with_topk(kb: KnowledgeBase, k: int) -> KnowledgeBase:
    """Restrict attention to the k highest-scoring rows per query (unvalidated extension)."""
    return KnowledgeBase(kb.visual_keys, kb.text_values, kb.class_ids, "topk", int(k))


def save(kb: KnowledgeBase, path) -> None:
    manifest = {"kind": "knowledge_base", "mode": kb.mode, "topk": kb.topk,
                "rows": len(kb), "dim": kb.dim, "class_ids": [int(c) for c in kb.class_ids]}
    blob.write_bundle(path, manifest, {"visual_keys": kb.visual_keys, "text_values": kb.text_values})


def load(path) -> KnowledgeBase:
    manifest, arrays = blob.read_bundle(path)
    if manifest.get("kind") != "knowledge_base":
        raise FormatError(f"{path} is not a knowledge base bundle")
    keys, vals = arrays.get("visual_keys"), arrays.get("text_values")
    if keys is None or vals is None:
        raise FormatError("knowledge base bundle is missing a blob")
    ids = np.array(manifest["class_ids"], dtype=np.int64)
    if keys.shape[0] != manifest["rows"] or vals.shape[0] != manifest["rows"] or ids.size != manifest["rows"]:
        raise FormatError(f"manifest says {manifest['rows']} rows, blobs have {keys.shape[0]}/{vals.shape[0]}")
    return KnowledgeBase(keys, vals, ids, manifest["mode"], manifest.get("topk"))


def info(kb: KnowledgeBase) -> dict:
    return {"mode": kb.mode, "rows": len(kb), "dim": kb.dim,
            "classes": int(np.unique(kb.class_ids).size), "topk": kb.topk}
