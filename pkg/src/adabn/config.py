"""Declarative experiment configuration (JSON), validated before any work runs."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DomainConfig(_Strict):
    id: str
    role: Literal["source", "target"]
    kind: Literal["affine", "class_conditional"] = "affine"
    # random shift direction with this norm; ignored when ``shift`` is given
    shift_norm: float = Field(0.0, ge=0)
    shift: Optional[list[float]] = None
    scale_min: float = Field(1.0, gt=0)
    scale_max: float = Field(1.0, gt=0)
    scale: Optional[list[float]] = None
    rotation: Optional[float] = None
    noise_sigma: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _scale_order(self):
        if self.scale_max < self.scale_min:
            raise ValueError("scale_max must be >= scale_min")
        return self


class DataConfig(_Strict):
    generator: Literal["blobs", "digits"] = "blobs"
    class_count: int = Field(4, ge=2)
    dim: int = Field(8, ge=1)
    separation: float = Field(4.0, gt=0)
    image_size: int = Field(12, ge=8)
    source_per_class: int = Field(500, ge=1)
    source_test_per_class: int = Field(250, ge=1)
    target_per_class: int = Field(1000, ge=1)
    domains: list[DomainConfig] = Field(default_factory=lambda: [
        DomainConfig(id="source", role="source"),
        DomainConfig(id="target", role="target", shift_norm=12.0, scale_min=0.5, scale_max=2.0),
    ])

    @model_validator(mode="after")
    def _roles(self):
        ids = [d.id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ValueError("domain ids must be unique")
        if not any(d.role == "source" for d in self.domains):
            raise ValueError("at least one source domain is required")
        if not any(d.role == "target" for d in self.domains):
            raise ValueError("at least one target domain is required")
        if self.generator == "digits" and self.class_count != 10:
            raise ValueError("the digits generator always has class_count 10")
        return self


class ModelConfig(_Strict):
    preset: Literal["mlp", "cnn"] = "mlp"
    hidden: list[int] = Field(default_factory=lambda: [32, 32])
    channels: list[int] = Field(default_factory=lambda: [8, 16])
    eps: float = Field(1e-5, gt=0)
    momentum: float = Field(0.1, gt=0, le=1)


class TrainSection(_Strict):
    base_lr: float = Field(0.01, ge=0)
    lr_drop_factor: float = Field(0.1, gt=0, lt=1)
    lr_drop_every: int = Field(40, ge=1)
    epochs: int = Field(100, ge=0)
    batch_size: int = Field(64, ge=2)
    frozen_layers: list[str] = Field(default_factory=list)
    per_layer_lr_scale: dict[str, float] = Field(default_factory=dict)
    val_fraction: float = Field(0.1, ge=0, lt=1)


class AdaptSection(_Strict):
    estimation_mode: Literal["sequential", "simultaneous"] = "sequential"
    # use only this many target mini-batches for estimation (None: whole target set)
    batches: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(64, ge=2)


class AnalysisSection(_Strict):
    divergence: bool = True
    pilot: bool = True
    sensitivity: bool = True
    layers: Optional[list[str]] = None
    batch_size: int = Field(64, ge=2)
    batch_counts: list[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16, 32])
    trials: int = Field(10, ge=1)
    pilot_min_batches: int = Field(20, ge=2)


class ChecksSection(_Strict):
    min_adaptation_gain: float = 0.10
    max_divergence_ratio: float = 0.5
    min_pilot_accuracy: float = 0.95


class ExperimentConfig(_Strict):
    experiment_id: str = "default"
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainSection = Field(default_factory=TrainSection)
    adapt: AdaptSection = Field(default_factory=AdaptSection)
    analysis: AnalysisSection = Field(default_factory=AnalysisSection)
    checks: ChecksSection = Field(default_factory=ChecksSection)

    def canonical_json(self) -> str:
        """Sorted, compact JSON of everything that affects results (``out_dir`` excluded)."""
        return json.dumps(self.model_dump(mode="json", exclude={"out_dir"}), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{path}: {err['msg']}")
    return "; ".join(parts)


def parse_config(raw: dict) -> ExperimentConfig:
    # a run manifest embeds its config under "config"
    if isinstance(raw, dict) and "config" in raw and "outputs" in raw:
        raw = raw["config"]
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_format_errors(exc)}") from None


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    return parse_config(raw)
