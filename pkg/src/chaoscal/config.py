"""Run configuration: nested dataclasses loaded from JSON.

Defaults describe the desk-scale L96 experiment (K=8, J=4, n=256, 200 epochs);
they are engineering choices, not the published full-scale setup.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .forward import SystemConfig
from .storage import config_hash


class ConfigError(ValueError):
    pass


L96_TRAIN_RANGE = ((-5.0, 0.0, 0.1, 0.0), (20.0, 5.0, 25.0, 25.0))
L96_TEST_RANGE = ((-3.0, 0.5, 2.0, 2.0), (18.0, 4.5, 23.0, 23.0))
KSE_TRAIN_RANGE = ((0.1,) * 3, (10.0,) * 3)
KSE_TEST_RANGE = ((0.5,) * 3, (9.5,) * 3)


@dataclass
class DataConfig:
    train_low: tuple[float, ...] = L96_TRAIN_RANGE[0]
    train_high: tuple[float, ...] = L96_TRAIN_RANGE[1]
    test_low: tuple[float, ...] = L96_TEST_RANGE[0]
    test_high: tuple[float, ...] = L96_TEST_RANGE[1]
    n_train: int = 256
    n_test: int = 64
    train_len: int = 1000
    test_len: int = 1000
    burn_in: int = 0
    noise_r: float = 0.0
    chunk: int = 64


@dataclass
class ModelConfig:
    crop_len: int = 250
    conv_widths: tuple[int, ...] = (32, 64, 128)
    conv_strides: tuple[int, ...] = (1, 2, 2)
    kernel: int = 5
    hidden: int = 128
    embed_dim: int = 32
    component_dim: int = 16
    n_blocks: int = 3


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 0.01
    weight_decay: float = 1e-5
    warmup_epochs: int = 10
    w_zz: float = 1.0
    w_pp: float = 1.0
    w_zp: float = 1.0
    w_mape: float = 1.0
    tau0: float = 0.15
    tau_max: float = 0.5
    hold_epochs: int = 100
    tau_prime: float = 0.15
    tau_prime_max: float | None = None
    tau_prime_ramp: tuple[int, int] | None = None
    bank_capacity: int = 768
    threshold: float = 0.45
    perturb_prob: float = 0.5
    perturb_std: float = 0.04
    val_size: int = 5
    val_crops: int = 8
    eps: float = 1e-6


@dataclass
class EstimateConfig:
    M: int = 100
    N: int = 50
    alpha: float = 0.3
    prior: str = "empb"  # prior for the emulator mode: "empb" or "fixed"
    variance_source: str = "truth"  # "truth" or "prior_mean"
    var_blocks: int = 20
    n_crops: int = 8
    heatmap_resolution: int = 21
    heatmap_clip: float = 100.0


@dataclass
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    estimate: EstimateConfig = field(default_factory=EstimateConfig)
    seed: int = 0
    label: str = "desk-scale (not full scale)"

    def validate(self) -> "RunConfig":
        s, d, t, m = self.system, self.data, self.train, self.model
        if s.system not in ("l96", "kse"):
            raise ConfigError(f"unknown system {s.system!r}")
        k = len(s.param_names)
        for name in ("train_low", "train_high", "test_low", "test_high"):
            if len(getattr(d, name)) != k:
                raise ConfigError(f"data.{name} must have {k} components")
        for lo, hi, tlo, thi in zip(d.train_low, d.train_high, d.test_low, d.test_high):
            if not (lo <= tlo <= thi <= hi):
                raise ConfigError("test range must lie inside the train range componentwise")
        if s.system == "l96" and min(d.train_low[2], d.test_low[2]) <= 0:
            raise ConfigError("the L96 timescale ratio c must stay positive")
        if not s.dt > 0:
            raise ConfigError("dt must be positive")
        if m.crop_len > min(d.train_len, d.test_len):
            raise ConfigError("crop length exceeds trajectory length")
        if t.epochs < 1 or not 0 <= t.hold_epochs < t.epochs:
            raise ConfigError("need epochs >= 1 and 0 <= hold_epochs < epochs")
        if t.batch_size < 2:
            raise ConfigError("batch size must be >= 2")
        if t.val_size >= d.n_train:
            raise ConfigError("validation split must be smaller than the training set")
        if self.estimate.prior not in ("empb", "fixed"):
            raise ConfigError("estimate.prior must be 'empb' or 'fixed'")
        if self.estimate.variance_source not in ("truth", "prior_mean"):
            raise ConfigError("estimate.variance_source must be 'truth' or 'prior_mean'")
        if m.embed_dim < k:
            raise ConfigError("embedding dim must be >= parameter dim")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {path or 'config'}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{path}.{name}" if path else name)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path or 'config'}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(data)
