"""Run configuration: one JSON document, overridable from the command line."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

SPACES = ("input", "pca", "vae", "imported")
CONDITIONING = ("conditional", "unconditional")


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("CONDATTR_JOBS", "1")))
    except ValueError:
        return 1


@dataclass
class SynthConfig:
    d: int = 10
    r: int = 2
    T: int = 20000
    train_end: int = 8000
    n_per_kind: int = 10
    kinds: list = field(default_factory=lambda: ["spike", "shift", "noise", "drift", "dropout", "saturation"])
    magnitude: float = 3.0
    duration: list = field(default_factory=lambda: [40, 80])
    gap: int = 60
    noise_scale: float = 0.1
    factor_smoothness: float = 0.99
    offset: float = 5.0
    seed: int = 0


@dataclass
class RunConfig:
    series_csv: Optional[str] = None
    labels_json: Optional[str] = None
    has_timestamp: bool = False
    synth: Optional[SynthConfig] = None
    train_range: Optional[list] = None
    w: int = 50
    stride: int = 1
    detector: dict = field(default_factory=lambda: {"kind": "pca", "k_pca": 8})
    threshold_q: float = 0.995
    holdout_fraction: float = 0.2
    embedding: dict = field(default_factory=lambda: {"kind": "pca", "k": 8})
    retrieval_space: str = "pca"
    conditioning: str = "conditional"
    shared_neighborhood: bool = False
    K: int = 3
    segment: int = 1
    metric_ks: list = field(default_factory=lambda: [3, 5, 10])
    beta: float = 1.0
    eps: float = 1e-8
    seed: int = 0
    signed_ranking: bool = False
    window_filter: str = "detected"
    timestep_ranking: str = "window"
    artifacts_dir: Optional[str] = None
    jobs: int = field(default_factory=default_jobs)

    def validate(self) -> "RunConfig":
        if self.retrieval_space not in SPACES:
            raise ValueError(f"retrieval_space must be one of {SPACES}")
        if self.conditioning not in CONDITIONING:
            raise ValueError(f"conditioning must be one of {CONDITIONING}")
        if self.window_filter not in ("detected", "all"):
            raise ValueError("window_filter must be 'detected' or 'all'")
        if self.timestep_ranking not in ("window", "tensor"):
            raise ValueError("timestep_ranking must be 'window' or 'tensor'")
        if self.w < 1 or self.stride < 1 or self.K < 1 or self.segment < 1:
            raise ValueError("w, stride, K and segment must be positive")
        if self.series_csv is None and self.synth is None:
            raise ValueError("config needs either series_csv or synth")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        obj = copy.deepcopy(obj)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        synth = obj.pop("synth", None)
        if synth is not None and not isinstance(synth, SynthConfig):
            synth = SynthConfig(**synth)
        return cls(synth=synth, **obj).validate()

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def apply_overrides(cfg: RunConfig, overrides: list) -> RunConfig:
    """``key=value`` overrides; values parse as JSON when possible. Dotted keys
    reach into nested dicts (``detector.k_pca=16``, ``synth.seed=3``)."""
    d = cfg.to_dict()
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        target = d
        for p in parts[:-1]:
            if target.get(p) is None:
                target[p] = {}
            target = target[p]
        target[parts[-1]] = value
    return RunConfig.from_dict(d)
