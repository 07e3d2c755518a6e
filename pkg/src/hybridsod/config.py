"""Run configuration: one YAML/JSON file, defaults below, flags override."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import ContaminationSpec
from .exceptions import ConfigError
from .losses import LossWeights
from .training import OptimizerPolicy

MODES = ("full", "M1", "M2", "M3", "No1", "No2", "No3", "No4")
SCHEDULED_MODES = ("full", "No2", "No3", "No4")
OUTPUT_ENV = "HYBRIDSOD_OUTPUT_ROOT"


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on.

    Defaults follow the full-scale protocol (10 groups, 1,000 real labels,
    288 px R-Net / 320 px S-Net, 30 epochs per network per iteration).
    """

    data_dir: str | None = None
    val_dir: str | None = None
    output_dir: str = "runs/default"
    num_groups: int = 10
    num_real: int = 1000
    seed: int = 0
    mode: str = "full"
    rnet_size: int = 288
    snet_size: int = 320
    rnet_channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    snet_channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    rnet_backbone: str = "plain"
    loss_weights: tuple[float, float, float] = (0.2, 0.4, 0.8)
    optimizer: OptimizerPolicy = field(default_factory=OptimizerPolicy)
    contamination: ContaminationSpec = field(default_factory=ContaminationSpec)
    augment: bool = True
    generate_coarse: bool = False
    predict_batch_size: int = 8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.num_groups < 2:
            raise ConfigError("num_groups must be >= 2")
        if self.num_real < 1:
            raise ConfigError("num_real must be >= 1")
        for k in ("rnet_channels", "snet_channels", "loss_weights"):
            object.__setattr__(self, k, tuple(getattr(self, k)))
        LossWeights(self.loss_weights)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        for key, sub in (("optimizer", OptimizerPolicy), ("contamination", ContaminationSpec)):
            if isinstance(d.get(key), dict):
                sub_known = {f.name for f in dataclasses.fields(sub)}
                bad = sorted(set(d[key]) - sub_known)
                if bad:
                    raise ConfigError(f"unknown {key} keys: {bad}")
                d[key] = sub(**d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        for k, v in changes.items():
            if k in ("optimizer", "contamination") and isinstance(v, dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        return RunConfig.from_dict(d)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Resolve file < env (output root) < explicit overrides."""
    import os

    d: dict = {}
    if path is not None:
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    if os.environ.get(OUTPUT_ENV):
        d["output_dir"] = os.environ[OUTPUT_ENV]
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k in ("optimizer", "contamination"):
            d[k] = {**(d.get(k) or {}), **v}
        else:
            d[k] = v
    return RunConfig.from_dict(d)
