"""Experiment configuration and the two size presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .framework import MODES
from .model import TASKS

PRESETS = {
    # sizes and rates reported for the full-scale experiments
    "fidelity": dict(dims=[2, 16, 128], hidden=[512, 512], controller_hidden=[512, 512], batch_size=500,
                     lr_w=0.01, lr_theta=0.001),
    # desk scale: d_N=16, DLRS 32x64 / 64x64, controller H=64
    # rates picked on a held-out synthetic stream (seed 100), not the evaluation streams
    "desk": dict(dims=[2, 8, 16], hidden=[64, 64], controller_hidden=[64, 64], batch_size=500,
                 lr_w=1.0, lr_theta=1.0),
}

# per-mode exceptions to a preset, tuned the same way
MODE_OVERRIDES = {
    "desk": {"fse": dict(lr_w=5.0)},
}

DEFAULT_EDGES = [0, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000]


@dataclass
class SynthSpec:
    users: int = 2000
    items: int = 1000
    interactions: int = 50000
    exponent: float = 1.2
    seed: int = 0


@dataclass
class ExperimentConfig:
    """Everything needed to regenerate a run.  ``None`` fields come from ``preset``."""

    dataset: str | None = None
    synth: SynthSpec | None = None
    task: str = "regression"
    mode: str = "autoemb"
    preset: str = "fidelity"
    dims: list | None = None
    hidden: list | None = None
    controller_hidden: list | None = None
    feature_size: int = 38
    batch_size: int | None = None
    lr_w: float | None = None
    lr_theta: float | None = None
    xi: float | None = None
    second_order: bool = False
    seeds: list = field(default_factory=lambda: [0])
    offline_fraction: float = 0.7
    val_capacity: int = 50000
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    popularity_edges: list = field(default_factory=lambda: list(DEFAULT_EDGES))
    output_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.synth, dict):
            self.synth = SynthSpec(**self.synth)
        if self.preset not in PRESETS:
            raise ConfigError(f"preset: expected one of {sorted(PRESETS)}, got {self.preset!r}")
        defaults = {**PRESETS[self.preset], **MODE_OVERRIDES.get(self.preset, {}).get(self.mode, {})}
        for name, value in defaults.items():
            if getattr(self, name) is None:
                setattr(self, name, list(value) if isinstance(value, list) else value)
        self.validate()

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"{name}: {why}")

        if self.dataset is None and self.synth is None:
            bad("dataset", "either a dataset path or a synth spec is required")
        if self.task not in TASKS:
            bad("task", f"expected one of {TASKS}, got {self.task!r}")
        if self.mode not in MODES:
            bad("mode", f"expected one of {MODES}, got {self.mode!r}")
        if not self.dims or any(int(d) < 1 for d in self.dims):
            bad("dims", "must be a non-empty list of positive integers")
        if any(b <= a for a, b in zip(self.dims, self.dims[1:])):
            bad("dims", f"must be strictly increasing, got {self.dims}")
        if not self.hidden or any(int(h) < 1 for h in self.hidden):
            bad("hidden", "must be a non-empty list of positive integers")
        if not self.controller_hidden or any(int(h) < 1 for h in self.controller_hidden):
            bad("controller_hidden", "must be a non-empty list of positive integers")
        if self.feature_size < 4 + len(self.dims):
            bad("feature_size", f"must be >= {4 + len(self.dims)}")
        if self.batch_size < 1:
            bad("batch_size", "must be >= 1")
        if self.lr_w < 0:
            bad("lr_w", "must be >= 0")
        if self.lr_theta < 0:
            bad("lr_theta", "must be >= 0")
        if self.xi is not None and self.xi < 0:
            bad("xi", "must be >= 0")
        if self.second_order and self.xi == 0:
            bad("xi", "second_order requires xi > 0")
        if not self.second_order and self.xi:
            bad("xi", "xi > 0 requires second_order")
        if not self.seeds:
            bad("seeds", "at least one seed is required")
        if not 0 < self.offline_fraction < 1:
            bad("offline_fraction", "must be in (0, 1)")
        if self.val_capacity < 1:
            bad("val_capacity", "must be >= 1")
        if self.bn_eps <= 0:
            bad("bn_eps", "must be > 0")
        if not self.popularity_edges or any(b <= a for a, b in zip(self.popularity_edges, self.popularity_edges[1:])):
            bad("popularity_edges", "must be strictly increasing")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown config field")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)
