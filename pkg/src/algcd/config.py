"""Declarative run configuration: one JSON document, strict keys."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .synth import SynthConfig
from .trainer import Stage1Config, Stage2Config

HOSTS = ("parametric", "kmeans")
AXES = ("layers", "alpha", "components")
COMPONENTS = ("none", "initial", "initial+stacked")


@dataclass(frozen=True)
class AtcgSection:
    num_stacked: int = 2
    projections: bool = True
    init_noise: float = 0.02
    seed: int = 0
    kb_mode: str = "full"
    kb_topk: Optional[int] = None
    head_hidden: int = 256
    head_out: int = 64

    def validate(self):
        if self.num_stacked < 0:
            raise ConfigError("atcg.num_stacked must be >= 0")
        if self.kb_mode not in ("full", "class_prototype", "topk"):
            raise ConfigError(f"atcg.kb_mode must be full, class_prototype or topk, got {self.kb_mode!r}")
        if self.kb_mode == "topk" and (self.kb_topk is None or self.kb_topk < 1):
            raise ConfigError("atcg.kb_topk must be a positive integer in topk mode")
        if self.head_hidden < 1 or self.head_out < 1:
            raise ConfigError("head sizes must be positive")


@dataclass(frozen=True)
class EvalSection:
    host: str = "parametric"
    K: Optional[int] = None
    seed: int = 0

    def validate(self):
        if self.host not in HOSTS:
            raise ConfigError(f"eval.host must be one of {HOSTS}, got {self.host!r}")
        if self.K is not None and self.K < 2:
            raise ConfigError("eval.K must be >= 2")


def _default_alphas():
    return [round(0.1 * i, 1) for i in range(11)]


@dataclass(frozen=True)
class AblateSection:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    layers: list = field(default_factory=lambda: [0, 2, 4, 6])
    alphas: list = field(default_factory=_default_alphas)
    components: list = field(default_factory=lambda: list(COMPONENTS))

    def validate(self):
        if len(self.seeds) < 3:
            raise ConfigError("ablate.seeds needs at least 3 seeds")
        if any(n < 0 for n in self.layers):
            raise ConfigError("ablate.layers must be >= 0")
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ConfigError("ablate.alphas must lie in [0, 1]")
        bad = set(self.components) - set(COMPONENTS)
        if bad:
            raise ConfigError(f"unknown ablate.components {sorted(bad)}")


SECTIONS = {"synth": SynthConfig, "atcg": AtcgSection, "train_stage1": Stage1Config,
            "train_stage2": Stage2Config, "eval": EvalSection, "ablate": AblateSection}


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    atcg: AtcgSection = field(default_factory=AtcgSection)
    train_stage1: Stage1Config = field(default_factory=Stage1Config)
    train_stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def validate(self) -> "RunConfig":
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, section: str, **changes) -> "RunConfig":
        d = self.to_dict()
        d[section].update(changes)
        return from_dict(d)


def _section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key {name}.{unknown[0]}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad value in section {name!r}: {exc}") from exc


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    parts = {name: _section(name, cls, raw.get(name, {})) for name, cls in SECTIONS.items()}
    return RunConfig(**parts).validate()


def load(path) -> RunConfig:
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig().validate()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(raw)
