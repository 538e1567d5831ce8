"""Pipeline configuration: one JSON document, every tunable with a default.

Fields whose values the source method fixes (patch size 25, stride 3, KDE
bandwidth 3.039, 5% negative sampling, 50 trees, the 0.5/0.2 labeling
thresholds, superpixel count range [100, 200]) default to those values;
knowingly different desk-scale defaults are reported by `deviations()`.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class SuperpixelConfig:
    cell_area: float = 27.0
    k_min: int = 100
    k_max: int = 200
    compactness: float = 10.0
    iters: int = 10
    intensity_scale: float = 40.0


@dataclass
class PatchConfig:
    size: int = 25
    stride: int = 3


@dataclass
class KdeConfig:
    bandwidth: float = 3.039
    neg_fraction: float = 0.05


@dataclass
class ForestParams:
    trees: int = 50
    min_leaf_frac: float = 0.002  # of the training-set size, in effective counts


@dataclass
class CnnConfig:
    preset: str = "desk"
    stride: int = 4        # dense-evaluation grid interval
    train_stride: int = 4  # patch sampling interval inside training superpixels
    lr: float = 0.01
    momentum: float = 0.9
    batch: int = 32
    epochs: int = 12


@dataclass
class CascadeParams:
    recall_target: float = 0.99
    theta_start: float = 0.05
    theta_stop: float = 0.95
    theta_step: float = 0.05
    connectivity: int = 26
    three_channel: bool = False  # 36-feature stage-2 variant


@dataclass
class CvConfig:
    folds: int = 6


@dataclass
class PipelineConfig:
    superpixel: SuperpixelConfig = field(default_factory=SuperpixelConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    kde: KdeConfig = field(default_factory=KdeConfig)
    forest: ForestParams = field(default_factory=ForestParams)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    cascade: CascadeParams = field(default_factory=CascadeParams)
    cv: CvConfig = field(default_factory=CvConfig)
    air_threshold: int = 500
    labeling_tau_pos: float = 0.5
    labeling_tau_neg: float = 0.2
    seed: int = 0
    workers: int = 1

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    def theta_grid(self):
        import numpy as np
        n = int(round((self.cascade.theta_stop - self.cascade.theta_start)
                      / self.cascade.theta_step)) + 1
        return np.round(self.cascade.theta_start
                        + self.cascade.theta_step * np.arange(n), 10)


_POSITIVE_FIELDS = [
    "superpixel.cell_area", "superpixel.k_min", "superpixel.k_max",
    "superpixel.compactness", "superpixel.iters", "superpixel.intensity_scale",
    "patch.size", "patch.stride", "kde.bandwidth", "forest.trees",
    "forest.min_leaf_frac", "cnn.stride", "cnn.train_stride", "cnn.batch",
    "cnn.epochs", "cascade.theta_step", "cv.folds", "workers",
]


def _get_dotted(cfg, path: str):
    obj = cfg
    for part in path.split("."):
        if not hasattr(obj, part):
            raise ConfigError(f"unknown config field {path!r}")
        obj = getattr(obj, part)
    return obj


def set_dotted(cfg: PipelineConfig, path: str, raw: str) -> None:
    """Apply a CLI override like 'forest.trees=20' with type coercion."""
    parts = path.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not hasattr(obj, part):
            raise ConfigError(f"unknown config field {path!r}")
        obj = getattr(obj, part)
    name = parts[-1]
    if not hasattr(obj, name):
        raise ConfigError(f"unknown config field {path!r}")
    current = getattr(obj, name)
    try:
        if isinstance(current, bool):
            value = raw.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        else:
            value = raw
    except ValueError as e:
        raise ConfigError(f"{path}: cannot parse {raw!r} as {type(current).__name__}") from e
    setattr(obj, name, value)


def _from_dict(cls, data: dict):
    kwargs = {}
    names = {f.name: f for f in fields(cls)}
    for key, val in data.items():
        if key not in names:
            raise ConfigError(f"unknown config field {cls.__name__}.{key}")
        f = names[key]
        if dataclasses.is_dataclass(f.type) or f.name in (
                "superpixel", "patch", "kde", "forest", "cnn", "cascade", "cv"):
            sub = {"superpixel": SuperpixelConfig, "patch": PatchConfig, "kde": KdeConfig,
                   "forest": ForestParams, "cnn": CnnConfig, "cascade": CascadeParams,
                   "cv": CvConfig}[f.name]
            kwargs[key] = _from_dict(sub, val)
        else:
            kwargs[key] = val
    return cls(**kwargs)


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p}: invalid JSON ({e})") from e
    return _from_dict(PipelineConfig, data)


def validate(cfg: PipelineConfig) -> None:
    for path in _POSITIVE_FIELDS:
        if _get_dotted(cfg, path) <= 0:
            raise ConfigError(f"{path} must be positive")
    if cfg.superpixel.k_min > cfg.superpixel.k_max:
        raise ConfigError("superpixel.k_min must not exceed superpixel.k_max")
    if not 0.0 <= cfg.labeling_tau_neg < cfg.labeling_tau_pos <= 1.0:
        raise ConfigError("need 0 <= labeling_tau_neg < labeling_tau_pos <= 1")
    if not 0.0 < cfg.cascade.recall_target <= 1.0:
        raise ConfigError("cascade.recall_target must be in (0, 1]")
    if not 0.0 < cfg.cascade.theta_start <= cfg.cascade.theta_stop < 1.0:
        raise ConfigError("need 0 < cascade.theta_start <= theta_stop < 1")
    if cfg.cascade.connectivity not in (6, 26):
        raise ConfigError("cascade.connectivity must be 6 or 26")
    if not 0.0 < cfg.kde.neg_fraction <= 1.0:
        raise ConfigError("kde.neg_fraction must be in (0, 1]")
    if cfg.cnn.preset not in ("desk", "paper"):
        raise ConfigError("cnn.preset must be 'desk' or 'paper'")
    if cfg.air_threshold < 0 or cfg.air_threshold > 4095:
        raise ConfigError("air_threshold must be in [0, 4095]")


def deviations(cfg: PipelineConfig) -> list[str]:
    """Desk-scale defaults that knowingly differ from the source method."""
    notes = ["forest.min_leaf is fractional (0.2% of samples); the source "
             "method uses a fixed 150 at its full data scale"]
    if cfg.cnn.preset != "paper":
        notes.append(f"cnn.preset={cfg.cnn.preset!r}: reduced architecture for CPU "
                     "training (use 'paper' for the five-conv-layer model)")
    if cfg.cv.folds != 6:
        notes.append(f"cv.folds={cfg.cv.folds} (source protocol uses 6)")
    return notes
