"""Turn an :class:`~adabn.config.ExperimentConfig` into datasets, models and reports."""
from __future__ import annotations

import hashlib
import json
import platform
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .config import DomainConfig, ExperimentConfig
from .data import (
    DomainDataset,
    ShiftSpec,
    class_conditional_shift,
    make_blobs,
    make_digits_grid,
    shift_domain,
)
from .engine import BnStatsBank, bank_from_running, estimate_domain_stats
from .layers import Model, cnn, mlp
from .trainer import TrainConfig, TrainingLog, train


def derive_seed(master: int, *keys: int | str) -> int:
    """Stable child seed; string keys are hashed so the mapping does not depend on Python's hash seed."""
    parts = [master] + [int.from_bytes(hashlib.sha256(k.encode()).digest()[:4], "little") if isinstance(k, str)
                        else k for k in keys]
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _domain_shift(cfg: ExperimentConfig, dom: DomainConfig, sample_shape: tuple[int, ...]) -> ShiftSpec:
    rng = np.random.default_rng(derive_seed(cfg.seed, "shift", dom.id))
    image = len(sample_shape) == 3
    width = sample_shape[0]
    if dom.shift is not None:
        shift = np.asarray(dom.shift)
    elif image:
        shift = np.full(width, dom.shift_norm)
    else:
        direction = rng.normal(size=width)
        shift = dom.shift_norm * direction / np.linalg.norm(direction)
    if dom.scale is not None:
        scale = np.asarray(dom.scale)
    elif dom.scale_max > dom.scale_min:
        scale = rng.uniform(dom.scale_min, dom.scale_max, size=width)
    else:
        scale = np.full(width, dom.scale_min)
    return ShiftSpec(shift, scale, dom.rotation, dom.noise_sigma, seed=derive_seed(cfg.seed, "noise", dom.id))


def generate_domains(cfg: ExperimentConfig) -> dict[str, DomainDataset]:
    """Datasets keyed ``"<domain>.train"`` / ``"<domain>.test"`` for sources and ``"<domain>"`` for targets.

    All domains are disjoint slices of one generated pool; each slice is then
    shifted by its domain's spec.
    """
    d = cfg.data
    sizes = []
    for dom in d.domains:
        if dom.role == "source":
            sizes += [(f"{dom.id}.train", d.source_per_class), (f"{dom.id}.test", d.source_test_per_class)]
        else:
            sizes.append((dom.id, d.target_per_class))
    per_class = sum(n for _, n in sizes)
    pool_seed = derive_seed(cfg.seed, "pool")
    if d.generator == "blobs":
        pool = make_blobs(d.class_count, per_class, d.dim, d.separation, pool_seed)
    else:
        pool = make_digits_grid(per_class, d.image_size, pool_seed)
    # stratified slicing keeps class balance in every split
    by_class = [np.flatnonzero(pool.labels == c) for c in range(pool.class_count)]
    out: dict[str, DomainDataset] = {}
    offset = 0
    doms = {dom.id: dom for dom in d.domains}
    for key, n in sizes:
        idx = np.sort(np.concatenate([ix[offset:offset + n] for ix in by_class]))
        offset += n
        part = pool.subset(idx)
        dom = doms[key.split(".")[0]]
        if dom.kind == "class_conditional":
            rng = np.random.default_rng(derive_seed(cfg.seed, "class_shift", dom.id))
            offsets = rng.normal(size=(part.class_count, *part.sample_shape))
            norms = np.linalg.norm(offsets.reshape(part.class_count, -1), axis=1)
            offsets *= (dom.shift_norm / norms).reshape(-1, *([1] * len(part.sample_shape)))
            out[key] = class_conditional_shift(part, offsets, dom.id)
        else:
            out[key] = shift_domain(part, _domain_shift(cfg, dom, part.sample_shape), dom.id)
    return out


def build_model(cfg: ExperimentConfig, sample_shape: tuple[int, ...], class_count: int) -> Model:
    m = cfg.model
    seed = derive_seed(cfg.seed, "init")
    if m.preset == "mlp":
        if len(sample_shape) != 1:
            raise ValueError("the mlp preset needs vector inputs")
        return mlp(sample_shape[0], class_count, tuple(m.hidden), seed, m.eps, m.momentum)
    if len(sample_shape) != 3 or sample_shape[1] != sample_shape[2]:
        raise ValueError("the cnn preset needs square image inputs")
    return cnn(sample_shape[0], sample_shape[1], class_count, tuple(m.channels), seed, m.eps, m.momentum)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(base_lr=t.base_lr, lr_drop_factor=t.lr_drop_factor, lr_drop_every=t.lr_drop_every,
                       epochs=t.epochs, batch_size=t.batch_size, frozen_layers=frozenset(t.frozen_layers),
                       per_layer_lr_scale=dict(t.per_layer_lr_scale), seed=derive_seed(cfg.seed, "train"),
                       val_fraction=t.val_fraction)


def train_sources(cfg: ExperimentConfig, sources: list[DomainDataset]) -> tuple[Model, BnStatsBank, TrainingLog]:
    """Train on all source domains and record their BN statistics in a bank.

    A single source is banked with its training-time running statistics, so
    selecting it reproduces plain eval mode exactly. With several sources each
    is banked with statistics estimated on its own training split.
    """
    first = sources[0]
    model = build_model(cfg, first.sample_shape, first.class_count)
    model, log = train(model, sources, train_config(cfg))
    if len(sources) == 1:
        bank = bank_from_running(model, first.domain_id)
    else:
        bank = BnStatsBank()
        for ds in sources:
            bank.update(ds.domain_id, estimate_domain_stats(model, ds, mode=cfg.adapt.estimation_mode))
    return model, bank, log


def budget_subset(data: DomainDataset, batches: int | None, batch_size: int, seed: int) -> DomainDataset:
    """Random ``batches * batch_size`` samples (all of ``data`` when no budget is set)."""
    if batches is None:
        return data
    need = batches * batch_size
    rng = np.random.default_rng(seed)
    return data.subset(rng.choice(len(data), size=need, replace=need > len(data)))


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def versions() -> dict[str, str]:
    return {"adabn": __version__, "numpy": np.__version__, "python": platform.python_version()}


def write_manifest(out_dir: Path, command: str, *, config: ExperimentConfig | None, seed: int | None,
                   inputs: list[Path], outputs: list[Path], extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "config": None if config is None else config.model_dump(mode="json"),
        "config_hash": None if config is None else config.config_hash,
        "seed": seed,
        "versions": versions(),
        "inputs": [{"path": str(p), "sha256": file_sha256(p)} for p in inputs],
        "outputs": [{"path": str(Path(p).relative_to(out_dir) if Path(p).is_relative_to(out_dir) else p),
                     "sha256": file_sha256(p)} for p in outputs],
    }
    if extra:
        manifest.update(extra)
    path = out_dir / f"manifest.{command}.json"
    write_json(path, manifest)
    return path
