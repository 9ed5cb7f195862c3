"""Synthetic GCD benchmarks in embedding space.

Each class owns one unit text anchor. Visual class centres are the text
anchors pushed through a fixed random rotation, which stands in for the gap
between the two modalities; samples are noisy, renormalised copies of their
class centre. In fine-grained mode the text anchors are grouped into a few
super-groups so that sibling classes look alike.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy.stats import ortho_group

from . import blob
from .errors import ConfigError, FormatError, ProtocolViolation

SIDECAR = "synth_config.json"


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 20
    num_known: int = 10
    dim: int = 64
    samples_per_class: int = 50
    labeled_fraction: float = 0.5
    noise: float = 0.25
    modality_rotation_seed: int = 1
    fine_grained_groups: int = 5
    group_spread: float = 0.5
    rng_seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.num_known <= self.num_classes:
            raise ConfigError(f"need 1 <= num_known <= num_classes, got {self.num_known}/{self.num_classes}")
        if self.dim < 4:
            raise ConfigError(f"dim must be >= 4, got {self.dim}")
        if self.samples_per_class < 2:
            raise ConfigError("samples_per_class must be >= 2")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigError(f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}")
        if not self.noise > 0.0:
            raise ConfigError(f"noise must be > 0, got {self.noise}")
        if self.fine_grained_groups < 1:
            raise ConfigError("fine_grained_groups must be >= 1")
        if not self.group_spread > 0.0:
            raise ConfigError("group_spread must be > 0")

    @property
    def fine_grained(self) -> bool:
        return self.fine_grained_groups < self.num_classes


@dataclass
class GcdDataset:
    visual: np.ndarray
    text_anchors: np.ndarray
    labels: np.ndarray
    labeled_mask: np.ndarray
    known_classes: tuple
    visual_anchors: Optional[np.ndarray] = field(default=None, repr=False)
    config: Optional[SynthConfig] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.labeled_mask = np.asarray(self.labeled_mask, dtype=bool)
        self.known_classes = tuple(sorted(int(k) for k in self.known_classes))
        validate_dataset(self)

    @property
    def num_classes(self) -> int:
        return self.text_anchors.shape[0]

    @property
    def dim(self) -> int:
        return self.visual.shape[1]

    @property
    def labeled_idx(self) -> np.ndarray:
        return np.flatnonzero(self.labeled_mask)

    @property
    def unlabeled_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.labeled_mask)

    def is_old(self, labels) -> np.ndarray:
        return np.isin(labels, self.known_classes)


class SplitSummary(NamedTuple):
    labeled: int
    unlabeled: int
    known: int
    total: int


def validate_dataset(ds: GcdDataset) -> None:
    n, d = ds.visual.shape
    if n == 0:
        raise FormatError("empty dataset")
    if ds.text_anchors.ndim != 2 or ds.text_anchors.shape[1] != d:
        raise FormatError(f"text anchors {ds.text_anchors.shape} do not match visual dim {d}")
    if ds.labels.shape != (n,) or ds.labeled_mask.shape != (n,):
        raise FormatError(f"count mismatch: {n} visual rows, {ds.labels.size} labels, "
                          f"{ds.labeled_mask.size} mask entries")
    if ds.labels.min() < 0 or ds.labels.max() >= ds.text_anchors.shape[0]:
        raise FormatError("label outside [0, num_classes)")
    bad = ds.labeled_mask & ~np.isin(ds.labels, ds.known_classes)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ProtocolViolation(f"sample {i} is labeled but its class {int(ds.labels[i])} is not known")


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def text_anchors(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    K, d = cfg.num_classes, cfg.dim
    if not cfg.fine_grained:
        return _unit(rng.standard_normal((K, d)))
    centres = _unit(rng.standard_normal((cfg.fine_grained_groups, d)))
    group = np.arange(K) % cfg.fine_grained_groups
    return _tilt(centres[group], cfg.group_spread, rng)


def _tilt(c: np.ndarray, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate each unit row of ``c`` by exactly ``angle`` radians toward a random orthogonal direction."""
    u = rng.standard_normal(c.shape)
    u -= (u * c).sum(axis=1, keepdims=True) * c
    return _unit(np.cos(angle) * c + np.sin(angle) * _unit(u))


def modality_rotation(cfg: SynthConfig) -> np.ndarray:
    return ortho_group.rvs(cfg.dim, random_state=np.random.default_rng(cfg.modality_rotation_seed))


def generate(cfg: SynthConfig) -> GcdDataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    t = text_anchors(cfg, rng)
    mu = t @ modality_rotation(cfg).T
    labels = np.repeat(np.arange(cfg.num_classes), cfg.samples_per_class)
    visual = _unit(mu[labels] + cfg.noise * rng.standard_normal((labels.size, cfg.dim)))

    mask = np.zeros(labels.size, dtype=bool)
    per_class = int(np.floor(cfg.labeled_fraction * cfg.samples_per_class + 1e-9))
    for k in range(cfg.num_known):
        rows = np.flatnonzero(labels == k)
        mask[rng.choice(rows, size=per_class, replace=False)] = True
    return GcdDataset(visual=visual, text_anchors=t, labels=labels, labeled_mask=mask,
                      known_classes=tuple(range(cfg.num_known)), visual_anchors=mu, config=cfg)


def split_summary(ds: GcdDataset) -> SplitSummary:
    n_lab = int(ds.labeled_mask.sum())
    return SplitSummary(n_lab, int(ds.labels.size - n_lab), len(ds.known_classes), ds.num_classes)


# ---------------------------------------------------------------------------
# files

FILES = {"visual": "visual.bin", "text": "text_anchors.bin", "labels": "labels.txt", "mask": "mask.txt"}


def save_dataset(ds: GcdDataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blob.save_tensor(d / FILES["visual"], ds.visual)
    blob.save_tensor(d / FILES["text"], ds.text_anchors)
    blob.write_ints(d / FILES["labels"], ds.labels)
    blob.write_ints(d / FILES["mask"], ds.labeled_mask.astype(int))
    side = {"known_classes": list(ds.known_classes)}
    if ds.config is not None:
        side["config"] = asdict(ds.config)
    (d / SIDECAR).write_text(json.dumps(side, indent=2, sort_keys=True))


def _renorm(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms <= 1e-12):
        raise FormatError(f"{what}: zero-norm row {int(np.argmin(norms))}")
    dev = np.max(np.abs(norms - 1.0))
    if dev > 1e-3:
        warnings.warn(f"{what}: rows are not unit norm (max deviation {dev:.3g}); renormalising",
                      stacklevel=3)
    # already unit to machine precision: keep the stored bits so round trips are exact
    return x if dev <= 1e-12 else x / norms[:, None]


def load_embeddings(path_visual, path_text_anchors, path_labels, path_mask,
                    known_classes=None) -> GcdDataset:
    visual = blob.load_tensor(path_visual).astype(np.float64)
    anchors = blob.load_tensor(path_text_anchors).astype(np.float64)
    labels = blob.read_ints(path_labels)
    mask = blob.read_ints(path_mask)
    if visual.ndim != 2 or anchors.ndim != 2:
        raise FormatError("visual and text-anchor blobs must be matrices")
    if not (visual.shape[0] == labels.size == mask.size):
        raise FormatError(f"count mismatch: {visual.shape[0]} visual rows, {labels.size} labels, "
                          f"{mask.size} mask entries")
    if not np.isin(mask, (0, 1)).all():
        raise FormatError("mask entries must be 0 or 1")
    config = None
    side = Path(path_visual).parent / SIDECAR
    if side.exists():
        meta = json.loads(side.read_text())
        if known_classes is None:
            known_classes = meta.get("known_classes")
        if "config" in meta:
            config = SynthConfig(**meta["config"])
    if known_classes is None:
        known_classes = np.unique(labels[mask == 1])
    return GcdDataset(visual=_renorm(visual, "visual"), text_anchors=_renorm(anchors, "text anchors"),
                      labels=labels, labeled_mask=mask.astype(bool), known_classes=tuple(known_classes),
                      config=config)


def load_dataset(directory) -> GcdDataset:
    d = Path(directory)
    return load_embeddings(d / FILES["visual"], d / FILES["text"], d / FILES["labels"], d / FILES["mask"])
