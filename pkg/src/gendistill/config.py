"""JSON experiment configuration with strict key checking and dotted overrides."""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from gendistill.backbone import BackboneConfig
from gendistill.data import DatasetSpec
from gendistill.errors import ConfigError
from gendistill.interpreter import InterpreterConfig
from gendistill.losses import DistillConfig
from gendistill.optim import RunConfig
from gendistill.regressor import RegressorConfig
from gendistill.teacher import GENERIC_T_ENCODE, EncodeMode, UNetConfig, make_linear_schedule


@dataclass
class TeacherSection:
    unet: UNetConfig = field(default_factory=UNetConfig)
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    epochs: int = 15
    lr: float = 2e-3
    batch_size: int = 32
    checkpoint: str | None = None


@dataclass
class DatasetSection:
    source: str = "shapes"  # "shapes" or a .pt file holding images (and masks)
    mode: str = "encoded"
    cache: str = "online"
    cache_path: str | None = None
    augmentation: str = "horizontal_flip"
    encode_variant: str = "stochastic"
    t_encode: int = GENERIC_T_ENCODE
    encode_seed: int = 0
    data_seed: int = 0
    n_unlabeled: int = 2000
    n_labeled: int = 200
    n_test: int = 200
    num_classes: int = 5
    resolution: int = 256


@dataclass
class BackboneSection:
    stem_channels: int = 32
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    blocks_per_stage: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    checkpoint: str | None = None


@dataclass
class RegressorSection:
    fpn_channels: int = 256
    pool_scales: list[int] = field(default_factory=lambda: [1, 2, 3, 6])


@dataclass
class InterpreterSection:
    fuse_channels: int = 256
    groups: int = 32
    dropout_rate: float = 0.1
    n_labeled: int = 40
    epochs: int = 100
    t_encode: int = 50
    run: RunConfig = field(default_factory=lambda: RunConfig(base_lr=4e-3, batch_size=8, lr_scaling=False, warmup_epochs=10))
    checkpoint: str | None = None


@dataclass
class DistillSection:
    lambda_at: float = 10.0
    p: int = 2
    tau: float = 4.0
    lambda_d: float = 3.0
    lambda_ld: float = 1.0
    levels: list[int] = field(default_factory=lambda: [2, 3, 4, 5])
    eps: float = 1e-5
    mse_reduction: str = "mean"
    kd_tau_squared: bool = False
    variant: str = "feat"


@dataclass
class RunSection:
    pretrain: RunConfig = field(default_factory=lambda: RunConfig(batch_size=32))
    finetune: RunConfig = field(default_factory=lambda: RunConfig(batch_size=16))
    freeze: bool = False


@dataclass
class ExperimentConfig:
    teacher: TeacherSection = field(default_factory=TeacherSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    regressor: RegressorSection = field(default_factory=RegressorSection)
    interpreter: InterpreterSection = field(default_factory=InterpreterSection)
    distill: DistillSection = field(default_factory=DistillSection)
    run: RunSection = field(default_factory=RunSection)
    output_dir: str = "runs"

    # ---- conversions into the library's own config objects

    def schedule(self):
        return make_linear_schedule(self.teacher.T, self.teacher.beta_min, self.teacher.beta_max)

    def dataset_spec(self) -> DatasetSpec:
        d = self.dataset
        return DatasetSpec(d.mode, d.cache, EncodeMode(d.encode_variant, d.t_encode, d.encode_seed), d.augmentation)

    def backbone_config(self, seed: int) -> BackboneConfig:
        b = self.backbone
        return BackboneConfig(b.stem_channels, list(b.stage_channels), list(b.blocks_per_stage), seed)

    def regressor_config(self, teacher_channels: dict[int, int] | None = None) -> RegressorConfig:
        r = self.regressor
        cfg = RegressorConfig(r.fpn_channels, list(r.pool_scales))
        if teacher_channels is not None:
            cfg.teacher_channels = dict(teacher_channels)
        return cfg

    def interpreter_config(self, teacher_channels: dict[int, int]) -> InterpreterConfig:
        i = self.interpreter
        return InterpreterConfig(self.dataset.num_classes, i.fuse_channels, i.groups, i.dropout_rate, dict(teacher_channels))

    def distill_config(self) -> DistillConfig:
        d = asdict(self.distill)
        d.pop("variant")
        return DistillConfig(**d)

    def validate(self) -> None:
        self.schedule()
        self.dataset_spec().validate()
        self.dataset_spec().encode.validate(self.teacher.T)
        EncodeMode("deterministic", self.interpreter.t_encode).validate(self.teacher.T)
        self.backbone_config(0).validate()
        self.regressor_config().validate(deepest_size=self.dataset.resolution // 32)
        self.distill_config().validate()
        self.run.pretrain.validate()
        self.run.finetune.validate()
        self.interpreter.run.validate()
        InterpreterConfig(self.dataset.num_classes, self.interpreter.fuse_channels, self.interpreter.groups,
                          self.interpreter.dropout_rate).validate()
        if self.dataset.resolution % 32:
            raise ConfigError(f"dataset.resolution {self.dataset.resolution} is not divisible by 32")
        from gendistill.harness import LOSS_VARIANTS

        if self.distill.variant not in LOSS_VARIANTS:
            raise ConfigError(f"distill.variant must be one of {sorted(LOSS_VARIANTS)}, got {self.distill.variant!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
        return from_dict(hint, value, path)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)] if args else list(value)
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {value!r}")
        kt, vt = args
        return {_coerce(k, kt, path): _coerce(v, vt, f"{path}.{k}") for k, v in value.items()}
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{path}: expected an integer, got {value!r}") from None
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict, path: str = ""):
    """Build dataclass ``cls`` from ``data``; unknown keys are errors, missing keys take defaults."""
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f" in section {path!r}" if path else ""
        raise ConfigError(f"unknown config key {unknown[0]!r}{where}; valid keys: {sorted(names)}")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides to a raw config dict (values parsed as JSON when possible)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            child = node.setdefault(p, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node = child
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
    data = apply_overrides(data, overrides or [])
    cfg = from_dict(ExperimentConfig, data)
    cfg.validate()
    return cfg
