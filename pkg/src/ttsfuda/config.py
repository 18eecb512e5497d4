"""Experiment configuration: nested dataclasses loaded from YAML or JSON.

Every field has a default, so an empty file is a valid config.  Loading
collects every problem (unknown keys, wrong types, out-of-range values)
into one :class:`ConfigError` instead of stopping at the first.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .exceptions import ConfigError
from .models import ArchSpec

DEFAULT_DELTA = 0.2 * math.log(2)


@dataclass
class OptimConfig:
    name: str = "adam"
    lr: float = 1e-4
    momentum: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    scheduler: str = "none"
    min_lr: float = 1e-4

    def validate(self, path):
        errors = []
        if self.name not in ("adam", "sgd"):
            errors.append(f"{path}.name: must be 'adam' or 'sgd', got {self.name!r}")
        if self.lr < 0:
            errors.append(f"{path}.lr: must be >= 0")
        if not 0 <= self.momentum < 1:
            errors.append(f"{path}.momentum: must lie in [0, 1)")
        if not 0 <= self.beta2 < 1:
            errors.append(f"{path}.beta2: must lie in [0, 1)")
        if self.scheduler not in ("none", "cosine"):
            errors.append(f"{path}.scheduler: must be 'none' or 'cosine', got {self.scheduler!r}")
        if self.min_lr < 0:
            errors.append(f"{path}.min_lr: must be >= 0")
        return errors


@dataclass
class SourceTrainConfig:
    epochs: int = 20
    optimizer: OptimConfig = field(default_factory=lambda: OptimConfig(lr=1e-3, scheduler="cosine", min_lr=1e-4))
    val_fraction: float = 0.2

    def validate(self, path):
        errors = self.optimizer.validate(f"{path}.optimizer")
        if self.epochs < 0:
            errors.append(f"{path}.epochs: must be >= 0")
        if not 0 <= self.val_fraction < 1:
            errors.append(f"{path}.val_fraction: must lie in [0, 1)")
        return errors


@dataclass
class SelectiveVoteConfig:
    """Selective-voting hyperparameters; ``delta`` is in nats."""

    alpha: float = 0.75
    delta: float = DEFAULT_DELTA
    lambda1: float = 0.3
    lambda2: float = 0.5
    binarize_threshold: float = 0.5

    def validate(self, path="stage1"):
        errors = []
        if not 0 <= self.alpha <= 1:
            errors.append(f"{path}.alpha: must lie in [0, 1], got {self.alpha}")
        if self.delta < 0:
            errors.append(f"{path}.delta: must be >= 0, got {self.delta}")
        if not 0 <= self.lambda1 < self.lambda2 <= 1:
            errors.append(f"{path}.lambda1/lambda2: need 0 <= lambda1 < lambda2 <= 1, got {self.lambda1}, {self.lambda2}")
        if not 0 < self.binarize_threshold < 1:
            errors.append(f"{path}.binarize_threshold: must lie in (0, 1)")
        return errors


@dataclass
class Stage1Config(SelectiveVoteConfig):
    epochs: int = 1
    ensemble: List[Any] = field(default_factory=lambda: ["default"])
    enhance: bool = True
    eem_weight: float = 1.0

    @property
    def M(self) -> int:
        return len(self.ensemble_specs(2))

    def ensemble_specs(self, dims):
        from .augment import default_specs, resolve_specs

        if list(self.ensemble) == ["default"]:
            return default_specs("ensemble", dims)
        return resolve_specs(self.ensemble, "ensemble")

    def validate(self, path="stage1"):
        errors = super().validate(path)
        if self.epochs < 0:
            errors.append(f"{path}.epochs: must be >= 0")
        if not self.ensemble:
            errors.append(f"{path}.ensemble: needs at least one augmentation (M >= 1)")
        else:
            try:
                specs = self.ensemble_specs(2)
                geometric = [s.name for s in specs if s.geometric]
                if geometric:
                    errors.append(f"{path}.ensemble: geometric augmentations not allowed: {geometric}")
            except ConfigError as exc:
                errors.append(f"{path}.ensemble: {exc}")
        if self.eem_weight < 0:
            errors.append(f"{path}.eem_weight: must be >= 0")
        return errors


@dataclass
class Stage2Config:
    epochs: int = 10
    ema_rate: float = 0.99
    strong: List[Any] = field(default_factory=lambda: ["default"])
    weak: List[Any] = field(default_factory=lambda: ["default"])
    swap_aug_routing: bool = False
    consistency_weight: float = 1.0
    pseudo_threshold: float = 0.5

    def tier_specs(self, tier, dims):
        from .augment import default_specs, resolve_specs

        items = self.strong if tier == "strong" else self.weak
        if list(items) == ["default"]:
            return default_specs(tier, dims)
        return resolve_specs(items, tier)

    def validate(self, path="stage2"):
        errors = []
        if self.epochs < 0:
            errors.append(f"{path}.epochs: must be >= 0")
        if not 0 <= self.ema_rate <= 1:
            errors.append(f"{path}.ema_rate: must lie in [0, 1], got {self.ema_rate}")
        if self.consistency_weight < 0:
            errors.append(f"{path}.consistency_weight: must be >= 0")
        if not 0 < self.pseudo_threshold < 1:
            errors.append(f"{path}.pseudo_threshold: must lie in (0, 1)")
        for tier in ("strong", "weak"):
            try:
                self.tier_specs(tier, 2)
            except ConfigError as exc:
                errors.append(f"{path}.{tier}: {exc}")
        return errors


@dataclass
class SynthConfig:
    n_source: int = 200
    n_target: int = 200
    n_source_val: int = 50
    image_size: int = 64
    shape_family: str = "ellipses"
    intensity_shift: float = 0.3
    contrast_scale: float = 0.6
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self, path="data.synthetic"):
        errors = []
        for name in ("n_source", "n_target"):
            if getattr(self, name) < 1:
                errors.append(f"{path}.{name}: must be >= 1")
        if self.n_source_val < 0:
            errors.append(f"{path}.n_source_val: must be >= 0")
        if self.image_size < 8:
            errors.append(f"{path}.image_size: must be >= 8")
        if self.shape_family not in ("ellipses", "blobs"):
            errors.append(f"{path}.shape_family: must be 'ellipses' or 'blobs'")
        if self.contrast_scale <= 0:
            errors.append(f"{path}.contrast_scale: must be > 0")
        if self.noise_sigma < 0:
            errors.append(f"{path}.noise_sigma: must be >= 0")
        return errors


@dataclass
class DataConfig:
    """Where the source and target data come from.

    ``kind`` is ``synthetic``, ``fundus`` (``images/`` + ``masks/`` folders)
    or ``volumes`` (BraTS-style case folders).
    """

    kind: str = "synthetic"
    source_dir: Optional[str] = None
    target_dir: Optional[str] = None
    target_eval_dir: Optional[str] = None
    image_size: int = 512
    modality_source: str = "T2"
    modality_target: str = "FLAIR"
    crop_size: Optional[List[int]] = None
    roi_size: List[int] = field(default_factory=lambda: [96, 96, 96])
    synthetic: SynthConfig = field(default_factory=SynthConfig)
    pooled_dice: bool = False

    def validate(self, path="data"):
        errors = []
        if self.kind not in ("synthetic", "fundus", "volumes"):
            errors.append(f"{path}.kind: must be synthetic, fundus or volumes, got {self.kind!r}")
        if self.kind == "synthetic":
            errors += self.synthetic.validate(f"{path}.synthetic")
        else:
            for name in ("source_dir", "target_dir"):
                value = getattr(self, name)
                if not value:
                    errors.append(f"{path}.{name}: required for kind={self.kind}")
                elif not Path(value).is_dir():
                    errors.append(f"{path}.{name}: directory {value!r} does not exist")
            if self.target_eval_dir and not Path(self.target_eval_dir).is_dir():
                errors.append(f"{path}.target_eval_dir: directory {self.target_eval_dir!r} does not exist")
        if self.image_size < 8:
            errors.append(f"{path}.image_size: must be >= 8")
        return errors


@dataclass
class AdaptConfig:
    """Full experiment configuration with the reference defaults."""

    arch: Dict[str, Any] = field(default_factory=lambda: ArchSpec().to_dict())
    source: SourceTrainConfig = field(default_factory=SourceTrainConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    data: DataConfig = field(default_factory=DataConfig)
    batch_size: int = 8
    seed: int = 0
    output_dir: str = "runs/experiment"
    device: str = "cpu"

    @property
    def arch_spec(self) -> ArchSpec:
        return ArchSpec.from_dict(self.arch)

    def validate(self):
        errors = []
        try:
            ArchSpec.from_dict(self.arch)
        except ConfigError as exc:
            errors += exc.errors
        except TypeError as exc:
            errors.append(f"arch: {exc}")
        errors += self.source.validate("source")
        errors += self.optimizer.validate("optimizer")
        errors += self.stage1.validate("stage1")
        errors += self.stage2.validate("stage2")
        errors += self.data.validate("data")
        if self.batch_size < 1:
            errors.append("batch_size: must be >= 1")
        return errors

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **overrides) -> "AdaptConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"stage2.epochs": 2})``."""
        data = self.to_dict()
        for key, value in overrides.items():
            node = data
            parts = key.split(".")
            for part in parts[:-1]:
                node = node[part]
            node[parts[-1]] = value
        return config_from_dict(data)


def _build(cls, data, path, errors):
    if not isinstance(data, dict):
        errors.append(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
        return cls()
    defaults = cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            errors.append(f"{where}: unknown field")
            continue
        default = getattr(defaults, key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, where, errors)
        elif default is None or value is None:
            kwargs[key] = value
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                errors.append(f"{where}: expected a boolean, got {value!r}")
            else:
                kwargs[key] = value
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                errors.append(f"{where}: expected an integer, got {value!r}")
            else:
                kwargs[key] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                errors.append(f"{where}: expected a number, got {value!r}")
            else:
                kwargs[key] = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                errors.append(f"{where}: expected a string, got {value!r}")
            else:
                kwargs[key] = value
        elif isinstance(default, (list, dict)):
            if not isinstance(value, type(default)):
                errors.append(f"{where}: expected a {type(default).__name__}, got {value!r}")
            elif isinstance(default, dict) and key == "arch":
                kwargs[key] = {**default, **value}
            else:
                kwargs[key] = value
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: Optional[Dict[str, Any]]) -> AdaptConfig:
    errors: List[str] = []
    cfg = _build(AdaptConfig, data or {}, "", errors)
    if not errors:
        errors = cfg.validate()
    if errors:
        raise ConfigError(f"invalid configuration ({len(errors)} problem(s)): " + "; ".join(errors), errors)
    return cfg


def load_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> AdaptConfig:
    """Load a YAML/JSON config file (or defaults when ``path`` is None)."""
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {str(path)!r} does not exist")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: cannot parse config ({exc})") from exc
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return config_from_dict(data)


def dump_config(cfg: AdaptConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
