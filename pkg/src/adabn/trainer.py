"""Mini-batch SGD with a step learning-rate schedule and layer freezing."""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from itertools import zip_longest

import numpy as np

from .data import DomainDataset
from .errors import ConfigError, PreconditionError
from .layers import Model, SoftmaxCrossEntropy, log_softmax

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    lr_drop_factor: float = 0.1
    lr_drop_every: int = 40
    epochs: int = 100
    batch_size: int = 64
    frozen_layers: frozenset[str] = frozenset()
    per_layer_lr_scale: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        self.frozen_layers = frozenset(self.frozen_layers)
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2: training-mode batch norm needs two samples")
        if self.base_lr < 0 or not 0 < self.lr_drop_factor < 1 or self.lr_drop_every < 1:
            raise ConfigError("need base_lr >= 0, lr_drop_factor in (0, 1), lr_drop_every >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if any(s <= 0 for s in self.per_layer_lr_scale.values()):
            raise ConfigError("per-layer learning-rate scales must be positive")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.base_lr * cfg.lr_drop_factor ** (epoch // cfg.lr_drop_every)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)

    COLUMNS = ("epoch", "lr", "loss", "accuracy", "val_loss", "val_accuracy")

    def to_tsv(self) -> str:
        """Tab-separated table, one header line then one line per epoch."""
        out = io.StringIO()
        out.write("\t".join(self.COLUMNS) + "\n")
        for r in self.records:
            out.write(f"{r.epoch}\t{r.lr!r}\t{r.loss!r}\t{r.accuracy!r}\t{r.val_loss!r}\t{r.val_accuracy!r}\n")
        return out.getvalue()

    @classmethod
    def from_tsv(cls, text: str) -> "TrainingLog":
        lines = text.strip().splitlines()
        if not lines or tuple(lines[0].split("\t")) != cls.COLUMNS:
            raise ValueError("not a training log")
        records = []
        for line in lines[1:]:
            e, *rest = line.split("\t")
            records.append(EpochRecord(int(e), *map(float, rest)))
        return cls(records)


@dataclass
class Metrics:
    accuracy: float
    mean_loss: float
    per_class_accuracy: dict[int, float]
    count: int


def _split_validation(ds: DomainDataset, fraction: float, rng: np.random.Generator):
    n_val = int(math.floor(len(ds) * fraction))
    if n_val == 0 or n_val == len(ds):
        return ds, ds
    perm = rng.permutation(len(ds))
    return ds.subset(np.sort(perm[n_val:])), ds.subset(np.sort(perm[:n_val]))


def _round_robin(datasets: list[DomainDataset], batch_size: int, rng: np.random.Generator):
    # each batch comes from exactly one domain; domains take turns
    streams = [list(ds.batches(batch_size, rng)) for ds in datasets]
    for group in zip_longest(*streams):
        for item, ds in zip(group, datasets):
            if item is not None and len(item[0]) >= 2:
                yield ds.domain_id, item[0], item[1]


def domain_batches(datasets: list[DomainDataset], batch_size: int, seed: int):
    """The (domain_id, x, y) sequence one training epoch would consume."""
    return _round_robin(datasets, batch_size, np.random.default_rng(seed))


def sgd_step(model: Model, grads: dict[str, dict[str, np.ndarray]], lr: float, cfg: TrainConfig) -> None:
    for layer in model.layers:
        if layer.name in cfg.frozen_layers or layer.name not in grads:
            continue
        step = lr * cfg.per_layer_lr_scale.get(layer.name, 1.0)
        if step == 0.0:
            continue
        for key, g in grads[layer.name].items():
            layer.params[key] = layer.params[key] - step * g
        layer.touch()


def train(model: Model, data: DomainDataset | list[DomainDataset], cfg: TrainConfig) -> tuple[Model, TrainingLog]:
    """Train a copy of ``model`` on one or more labeled domains.

    With several domains every mini-batch holds samples of a single domain, and
    domains alternate batch by batch. Frozen layers keep their parameters and,
    for BN layers, their running statistics.
    """
    datasets = [data] if isinstance(data, DomainDataset) else list(data)
    if not datasets:
        raise PreconditionError("no training data")
    for ds in datasets:
        if not ds.labeled:
            raise PreconditionError(f"domain {ds.domain_id!r} has no labels")
    model = model.clone()
    rng = np.random.default_rng(cfg.seed)
    splits = [_split_validation(ds, cfg.val_fraction, rng) for ds in datasets]
    train_sets = [t for t, _ in splits]
    val_sets = [v for _, v in splits]
    loss_fn = SoftmaxCrossEntropy()
    frozen_bn = [layer for layer in model.bn_layers if layer.name in cfg.frozen_layers]
    history = TrainingLog()

    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        total_loss = 0.0
        correct = 0
        seen = 0
        for _, x, y in _round_robin(train_sets, cfg.batch_size, rng):
            saved = [(bn.running_mean, bn.running_var) for bn in frozen_bn]
            logits, caches = model.forward_train(x)
            for bn, (m, v) in zip(frozen_bn, saved):
                bn.running_mean, bn.running_var = m, v
            loss, lcache = loss_fn.forward(logits, y)
            grads = model.backward(loss_fn.backward(lcache), caches)
            sgd_step(model, grads, lr, cfg)
            total_loss += loss * len(y)
            correct += int((logits.argmax(axis=1) == y).sum())
            seen += len(y)
        val = [evaluate(model, v) for v in val_sets]
        val_n = sum(m.count for m in val)
        record = EpochRecord(
            epoch, lr,
            total_loss / max(seen, 1), correct / max(seen, 1),
            sum(m.mean_loss * m.count for m in val) / val_n,
            sum(m.accuracy * m.count for m in val) / val_n,
        )
        history.records.append(record)
        log.debug("epoch %d lr %.4g loss %.4f acc %.3f", epoch, lr, record.loss, record.accuracy)
    return model, history


def fine_tune(model: Model, labeled_target: DomainDataset, cfg: TrainConfig) -> Model:
    """Supervised update on labeled target data, typically after :func:`adabn.engine.adapt`.

    The domain statistics selected on ``model`` stay in effect for inference.
    """
    if cfg.epochs == 0:
        return model.clone()
    return train(model, labeled_target, cfg)[0]


def evaluate(model: Model, data: DomainDataset, chunk: int = 1024) -> Metrics:
    """Eval-mode accuracy and loss using whatever BN statistics ``model`` carries."""
    if len(data) == 0:
        raise PreconditionError("cannot evaluate on an empty dataset")
    if not data.labeled:
        raise PreconditionError(f"domain {data.domain_id!r} has no labels")
    logits = model.predict(data.inputs, chunk)
    logp = log_softmax(logits)
    y = data.labels
    losses = -logp[np.arange(len(y)), y]
    hits = logits.argmax(axis=1) == y
    per_class = {int(c): float(hits[y == c].mean()) for c in np.unique(y)}
    return Metrics(float(hits.mean()), float(losses.mean()), per_class, len(y))

