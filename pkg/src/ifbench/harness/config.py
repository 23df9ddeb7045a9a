"""Experiment configuration: a JSON document validated into dataclasses."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..training import DIFFUSION_FAMILIES, FAMILIES

RUNS_ROOT_ENV = "IFBENCH_RUNS_ROOT"
DATA_KINDS = ("toy", "real")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class DataSpec:
    kind: str = "toy"
    root: str | None = None  # real: plate directory root; toy: where to render (defaults inside the run)
    split_config: str | None = None  # real only: JSON list of plate entries
    toy_seed: int = 0
    wells_per_group: int = 4
    sites_per_well: int = 2
    test_wells_per_group: int = 1
    style: str = "A"
    raw_size: int = 96


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    family: str = "unet"
    spec: dict = field(default_factory=dict)
    data: DataSpec = field(default_factory=DataSpec)
    epochs: int = 3
    steps_per_epoch: int | None = None
    batch_size: int = 1
    seed: int = 0
    target_size: int = 512
    output_root: str | None = None
    evaluate: bool = True
    profile: bool = True
    analyze: bool = True
    resources: bool = True
    workers: int = 1
    resource_sites: int = 10

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = _build(DataSpec, self.data, "data")
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}; choose from {', '.join(FAMILIES)}")
        if not self.name or any(c in self.name for c in "/\\"):
            raise ConfigError(f"invalid run name {self.name!r}")
        if self.data.kind not in DATA_KINDS:
            raise ConfigError(f"data.kind must be one of {DATA_KINDS}")
        if self.data.kind == "real" and (not self.data.root or not self.data.split_config):
            raise ConfigError("real data needs data.root and data.split_config")
        for name in ("epochs", "batch_size", "target_size", "workers", "resource_sites"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be positive")
        if self.resource_sites < 10:
            raise ConfigError("resource_sites must be at least 10")
        if not isinstance(self.spec, dict):
            raise ConfigError("spec must be a mapping")
        if "seed" in self.spec and self.spec["seed"] != self.seed:
            raise ConfigError("spec.seed conflicts with seed")

    @property
    def model_spec(self) -> dict:
        return {**self.spec, "seed": self.seed}

    def runs_root(self) -> Path:
        return Path(self.output_root or os.environ.get(RUNS_ROOT_ENV, "runs"))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "config")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        return cls.from_dict(d)


def _build(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        raise ConfigError(f"unknown {where} keys: {', '.join(extra)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from e


# Toy presets: 64 px images, small networks, a T=200 schedule for diffusion.
TOY_SPECS: dict[str, dict] = {
    "unet": dict(depth=3, base_width=16, lr=1e-3),
    "pix2pix": dict(depth=3, base_width=16, disc_widths=[16, 32, 64, 64]),
    "spade_gan": dict(depth=3, base_width=16, disc_widths=[16, 32, 64, 64], spade_hidden=16),
    "palette": dict(depth=3, base_width=32, T=200, beta_start=None, beta_end=None, lr=2e-4),
    "spade_diffusion": dict(depth=3, base_width=32, T=200, beta_start=None, beta_end=None, lr=2e-4,
                            spade_hidden=32),
}
# SPADE-only conditioning learns the BF mapping more slowly than concatenation
TOY_STEPS = {"unet": 500, "pix2pix": 500, "spade_gan": 500, "palette": 500, "spade_diffusion": 800}


def toy_preset(family: str, name: str | None = None, seed: int = 0, epochs: int = 3,
               style: str = "A", **overrides) -> ExperimentConfig:
    if family not in TOY_SPECS:
        raise ConfigError(f"unknown model family {family!r}")
    cfg = dict(
        name=name or f"toy-{family}", family=family, spec=dict(TOY_SPECS[family]),
        data=dict(kind="toy", toy_seed=seed, style=style), epochs=epochs,
        steps_per_epoch=TOY_STEPS[family], seed=seed, target_size=64,
    )
    cfg.update(overrides)
    return ExperimentConfig.from_dict(cfg)


def is_diffusion(cfg: ExperimentConfig) -> bool:
    return cfg.family in DIFFUSION_FAMILIES
