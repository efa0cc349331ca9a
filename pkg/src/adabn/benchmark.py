"""Seeded synthetic benchmarks built from experiment configs.

``prepare(default_config())`` is the single-source affine-shift task the CLI's
``repro`` runs by default; :func:`multi_source_config` adds a second, shifted
source domain.
"""
from __future__ import annotations

from dataclasses import dataclass

from .config import DataConfig, DomainConfig, ExperimentConfig
from .data import DomainDataset
from .engine import BnStatsBank
from .layers import Model
from .pipeline import generate_domains, train_sources
from .trainer import TrainingLog


@dataclass
class Benchmark:
    config: ExperimentConfig
    sources: list[DomainDataset]
    source_tests: list[DomainDataset]
    targets: list[DomainDataset]
    model: Model
    bank: BnStatsBank
    log: TrainingLog

    @property
    def source(self) -> DomainDataset:
        return self.sources[0]

    @property
    def source_test(self) -> DomainDataset:
        return self.source_tests[0]

    @property
    def target(self) -> DomainDataset:
        return self.targets[0]


def default_config(seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig(seed=seed)


def multi_source_config(seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig(
        experiment_id="multi_source",
        out_dir="runs/multi_source",
        seed=seed,
        data=DataConfig(domains=[
            DomainConfig(id="source_a", role="source"),
            DomainConfig(id="source_b", role="source", shift_norm=6.0, scale_min=0.5, scale_max=2.0),
            DomainConfig(id="target", role="target", shift_norm=12.0, scale_min=0.5, scale_max=2.0),
        ]),
    )


def split_domains(cfg: ExperimentConfig, datasets: dict[str, DomainDataset]):
    sources = [datasets[f"{d.id}.train"] for d in cfg.data.domains if d.role == "source"]
    tests = [datasets[f"{d.id}.test"] for d in cfg.data.domains if d.role == "source"]
    targets = [datasets[d.id] for d in cfg.data.domains if d.role == "target"]
    return sources, tests, targets


def prepare(cfg: ExperimentConfig | None = None) -> Benchmark:
    """Generate the config's domains and train the source model."""
    cfg = cfg or default_config()
    sources, tests, targets = split_domains(cfg, generate_domains(cfg))
    model, bank, log = train_sources(cfg, sources)
    return Benchmark(cfg, sources, tests, targets, model, bank, log)
