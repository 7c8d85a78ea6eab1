"""Experiment configuration: one JSON document, overridable from the CLI."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .convnet import TAPS, canonical_id
from .handcrafted import FeatureSpec
from .probe import LogRegConfig
from .simlab import MEASURES

DEFAULT_FEATURES = [
    "meanPower",
    "timeToDb(-70)",
    "waveletStat(25,mean,overTime)",
    "waveletCombined(25,overTime)",
    "top4Combined",
]


class ConfigError(ValueError):
    pass


@dataclass
class WeightSource:
    architecture: str
    seed: int
    path: str
    source_task: str = ""
    trained: bool = True


@dataclass
class ExperimentConfig:
    manifest: str = ""
    out_dir: str = "runs/default"
    architectures: list[str] = field(default_factory=lambda: ["Regular"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    taps: list[str] = field(default_factory=lambda: ["conv3"])
    features: list[str] = field(default_factory=lambda: list(DEFAULT_FEATURES))
    tasks: list[str] = field(default_factory=list)
    source_tasks: list[str] = field(default_factory=lambda: ["untrained"])
    measures: list[str] = field(default_factory=lambda: ["cka"])
    weights: list[WeightSource] = field(default_factory=list)
    noise_baseline: bool = True
    noise_seed: int = 0
    similarity_split: str = "test"
    cross_task: bool = False
    concat_with: list[str] = field(default_factory=list)
    logreg: LogRegConfig = field(default_factory=LogRegConfig)
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "weights" in d:
            d["weights"] = [w if isinstance(w, WeightSource) else WeightSource(**w) for w in d["weights"]]
        if "logreg" in d and isinstance(d["logreg"], dict):
            d["logreg"] = LogRegConfig(**d["logreg"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise ConfigError(f"cannot load config {path}: {e}") from e

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def effective_workers(self) -> int:
        cap = os.environ.get("FEATPROBE_WORKERS")
        w = max(1, int(self.workers))
        if cap:
            w = min(w, max(1, int(cap)))
        return w

    def feature_specs(self) -> list[FeatureSpec]:
        return [FeatureSpec.parse(f) for f in self.features]

    def validate(self, need_manifest: bool = True) -> None:
        if need_manifest and not Path(self.manifest).is_file():
            raise ConfigError(f"manifest not found: {self.manifest!r}")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        try:
            self.architectures = [canonical_id(a) for a in self.architectures]
            self.feature_specs()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        for t in self.taps:
            if t not in TAPS:
                raise ConfigError(f"unknown tap {t!r}")
        for m in self.measures:
            if m not in MEASURES:
                raise ConfigError(f"unknown measure {m!r}")
        if self.similarity_split not in ("train", "test", "all"):
            raise ConfigError(f"bad similarity_split {self.similarity_split!r}")
        for w in self.weights:
            if not Path(w.path).is_file():
                raise ConfigError(f"weight file not found: {w.path}")
