"""Run configuration: defaults, YAML loading and validation."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DomainConfig:
    """One schedule entry. ``translation`` is a magnitude along the seeded shift direction
    or an explicit vector."""

    rotation: float = 0.0
    translation: Any = 0.0
    noise_scale: float = 1.0
    label_flip_prob: float = 0.0
    num_batches: int = 50


@dataclass
class RunConfig:
    # conformal
    alpha: float = 0.2
    temperature: float = 0.1
    k: int = 1
    # selection
    selection: str = "cp"  # cp | random
    n_human: int = 3
    n_human_shift: int | None = None  # default 2 * n_human
    n_model: int | None = None  # default n_human for cp, 0 for random
    budget: int = 300
    buffer_capacity: int = 512
    shift_decay: float = 0.9
    shift_z: float = 3.0
    # weighting
    weighting: str = "adaptive"  # adaptive | uniform | geometric
    rho: float = 0.9
    reset_weights_on_shift: bool = False
    # classifier
    architecture: str = "linear"
    hidden_dim: int = 32
    eta_h: float = 0.01
    eta_m: float = 0.001
    steps_h: int = 1
    steps_m: int = 1
    pretrain_lr: float = 0.5
    pretrain_epochs: int = 500
    pretrain_tol: float = 1e-4
    # stream
    stream: str = "synthetic"  # synthetic | file
    features: str | None = None
    source_domain: int = 0
    eval_fraction: float = 0.2
    num_classes: int = 7
    feature_dim: int = 16
    radius: float = 3.0
    class_cov_scale: float = 1.0
    train_per_class: int = 200
    calibration_per_class: int = 50
    num_domains: int = 8
    batches_per_domain: int = 50
    batch_size: int = 32
    eval_per_domain: int = 200
    domains: list | None = None  # explicit schedule; list of DomainConfig-like dicts
    # run
    seed: Any = 0  # int or list of ints
    out: str | None = None
    format: str = "jsonl"

    def resolved_n_human_shift(self) -> int:
        return 2 * self.n_human if self.n_human_shift is None else self.n_human_shift

    def resolved_n_model(self) -> int:
        if self.n_model is not None:
            return self.n_model
        return self.n_human if self.selection == "cp" else 0

    def seeds(self) -> list[int]:
        return [int(s) for s in self.seed] if isinstance(self.seed, (list, tuple)) else [int(self.seed)]

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=int(seed))

    def validate(self) -> "RunConfig":
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(0.0 < self.alpha < 1.0, f"alpha must be in (0, 1), got {self.alpha}")
        need(self.temperature > 0, "temperature must be positive")
        need(1 <= self.k <= self.num_classes or self.stream == "file", f"k must be in [1, {self.num_classes}]")
        need(self.selection in ("cp", "random"), f"selection must be cp or random, got {self.selection!r}")
        need(self.weighting in ("adaptive", "uniform", "geometric"), f"unknown weighting {self.weighting!r}")
        need(0.0 < self.rho < 1.0, "rho must be in (0, 1)")
        need(self.n_human >= 1, "n_human must be positive")
        need(self.resolved_n_human_shift() >= self.n_human, "n_human_shift must be >= n_human")
        need(self.resolved_n_model() >= 0, "n_model must be nonnegative")
        need(self.budget >= 0, "budget must be nonnegative")
        need(self.buffer_capacity >= 1, "buffer_capacity must be positive")
        need(self.eta_h > 0 and self.eta_m > 0, "learning rates must be positive")
        need(self.steps_h >= 1 and self.steps_m >= 1, "step counts must be positive")
        need(self.architecture in ("linear", "mlp1"), f"unknown architecture {self.architecture!r}")
        need(self.stream in ("synthetic", "file"), f"stream must be synthetic or file, got {self.stream!r}")
        need(self.stream != "file" or bool(self.features), "stream=file needs a features path")
        need(self.batch_size >= 1, "batch_size must be positive")
        need(self.format in ("jsonl", "csv"), f"format must be jsonl or csv, got {self.format!r}")
        need(0.0 < self.shift_decay < 1.0 and self.shift_z > 0, "invalid shift detector settings")
        need(self.num_domains >= 1 and self.batches_per_domain >= 1, "schedule must be non-empty")
        need(len(self.seeds()) >= 1, "at least one seed is required")
        for name in ("alpha", "temperature", "eta_h", "eta_m", "rho"):
            need(math.isfinite(getattr(self, name)), f"{name} must be finite")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


FIELD_NAMES = {f.name for f in dataclasses.fields(RunConfig)}


def from_dict(data: dict) -> RunConfig:
    unknown = set(data) - FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return RunConfig(**data)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a key-value mapping")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return from_dict(data).validate()


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
