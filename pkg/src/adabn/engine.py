"""Adaptive batch normalization: target-domain statistic estimation and swapping.

Statistics are accumulated with a mergeable Welford accumulator so that a
dataset can be streamed in chunks (or sharded and merged) without holding all
activations in memory.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DegenerateStatisticsError, DimensionError, IncompleteBankError, PreconditionError
from .layers import Model
from .tensor import Tensor

log = logging.getLogger(__name__)

SEQUENTIAL = "sequential"
SIMULTANEOUS = "simultaneous"
MIN_RECOMMENDED_SAMPLES = 64


class SmallTargetWarning(UserWarning):
    """Fewer target samples than one mini-batch; the estimate will be noisy."""


@dataclass(frozen=True)
class WelfordAccumulator:
    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def empty(cls, width: int) -> "WelfordAccumulator":
        return cls(0, np.zeros(width), np.zeros(width))

    @property
    def width(self) -> int:
        return self.mean.shape[0]

    @property
    def variance(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros(self.width)
        return self.m2 / self.count

    def update(self, batch: Tensor) -> "WelfordAccumulator":
        """Fold the rows of a (rows, width) batch into the running moments."""
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 1:
            batch = batch[None, :]
        if batch.ndim != 2 or batch.shape[1] != self.width:
            raise DimensionError(f"batch shape {batch.shape} does not match accumulator width {self.width}")
        n_b = batch.shape[0]
        if n_b == 0:
            return self
        mean_b = batch.mean(axis=0)
        # constant columns are exact: the summed mean can be off by an ulp
        constant = batch.min(axis=0) == batch.max(axis=0)
        mean_b = np.where(constant, batch[0], mean_b)
        centred = batch - mean_b
        m2_b = (centred * centred).sum(axis=0)
        return self.merge(WelfordAccumulator(n_b, mean_b, m2_b))

    def merge(self, other: "WelfordAccumulator") -> "WelfordAccumulator":
        if other.width != self.width:
            raise DimensionError(f"cannot merge accumulators of width {self.width} and {other.width}")
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        return WelfordAccumulator(n, mean, np.maximum(m2, 0.0))


def welford_update(acc: WelfordAccumulator, batch: Tensor) -> WelfordAccumulator:
    return acc.update(batch)


def feature_rows(x: Tensor) -> Tensor:
    """View a BN input as (samples, features); conv channels pool over N, H, W."""
    if x.ndim == 2:
        return x
    if x.ndim == 4:
        return x.transpose(0, 2, 3, 1).reshape(-1, x.shape[1])
    raise DimensionError(f"expected 2-D or 4-D activations, got {x.shape}")


@dataclass(frozen=True)
class BnStats:
    mean: np.ndarray
    var: np.ndarray
    count: int

    @classmethod
    def from_accumulator(cls, acc: WelfordAccumulator) -> "BnStats":
        return cls(acc.mean.copy(), acc.variance, acc.count)


class BnStatsBank:
    """Per-(BN layer, domain) statistics."""

    def __init__(self):
        self._entries: dict[tuple[str, str], BnStats] = {}

    def put(self, layer: str, domain_id: str, stats: BnStats) -> None:
        if stats.mean.shape != stats.var.shape or stats.mean.ndim != 1:
            raise DimensionError(f"{layer}/{domain_id}: mean and variance must be equal-length vectors")
        if np.any(stats.var < 0):
            raise PreconditionError(f"{layer}/{domain_id}: negative variance")
        self._entries[(layer, domain_id)] = stats

    def get(self, layer: str, domain_id: str) -> BnStats:
        try:
            return self._entries[(layer, domain_id)]
        except KeyError:
            raise IncompleteBankError(layer, domain_id) from None

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> Iterator[tuple[tuple[str, str], BnStats]]:
        return iter(sorted(self._entries.items()))

    def domains(self) -> list[str]:
        return sorted({d for _, d in self._entries})

    def copy(self) -> "BnStatsBank":
        out = BnStatsBank()
        out._entries = dict(self._entries)
        return out

    def update(self, domain_id: str, entries: dict[str, BnStats]) -> None:
        for layer, stats in entries.items():
            self.put(layer, domain_id, stats)

    def validate(self, model: Model) -> None:
        widths = {bn.name: bn.num_features for bn in model.bn_layers}
        for (layer, domain), stats in self._entries.items():
            if layer not in widths:
                raise DimensionError(f"bank refers to unknown BN layer {layer!r} (domain {domain!r})")
            if stats.mean.shape != (widths[layer],):
                raise DimensionError(
                    f"bank entry {layer}/{domain} has {stats.mean.shape[0]} features, layer has {widths[layer]}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, BnStatsBank) or self._entries.keys() != other._entries.keys():
            return False
        return all(
            a.count == b.count and np.array_equal(a.mean, b.mean) and np.array_equal(a.var, b.var)
            for a, b in ((self._entries[k], other._entries[k]) for k in self._entries)
        )


def bank_from_running(model: Model, domain_id: str, bank: BnStatsBank | None = None) -> BnStatsBank:
    """Record the model's training-time running statistics as a domain entry (count 0)."""
    bank = bank.copy() if bank is not None else BnStatsBank()
    for bn in model.bn_layers:
        bank.put(bn.name, domain_id, BnStats(bn.running_mean.copy(), bn.running_var.copy(), 0))
    return bank


def _inputs_of(data) -> np.ndarray:
    inputs = getattr(data, "inputs", data)
    return np.asarray(inputs, dtype=np.float64)


def _chunks(x: np.ndarray, size: int) -> Iterator[np.ndarray]:
    for i in range(0, len(x), size):
        yield x[i:i + size]


def estimate_domain_stats(model: Model, data, up_to_layer: str | None = None, mode: str = SEQUENTIAL,
                          chunk_size: int = 256) -> dict[str, BnStats]:
    """Estimate per-feature mean and variance of every BN layer's input on ``data``.

    Labels are ignored. In ``sequential`` mode BN layer ``k`` is measured with
    BN layers ``1..k-1`` already normalizing by their freshly estimated
    statistics; ``simultaneous`` measures all layers in one pass under the
    model's training-time running statistics. Forward passes run in eval mode
    with scale and shift applied. Returns ``{layer_name: BnStats}`` in layer
    order.
    """
    if mode not in (SEQUENTIAL, SIMULTANEOUS):
        raise ValueError(f"unknown estimation mode {mode!r}")
    x = _inputs_of(data)
    if x.shape[0] == 0:
        raise PreconditionError("cannot estimate statistics from an empty dataset")
    bns = model.bn_layers
    if not bns:
        raise PreconditionError("model has no batch-norm layers")
    if up_to_layer is not None:
        names = [bn.name for bn in bns]
        if up_to_layer not in names:
            raise KeyError(f"{up_to_layer!r} is not a batch-norm layer")
        bns = bns[:names.index(up_to_layer) + 1]

    positions = [model.index(bn.name) for bn in bns]
    if x.shape[0] < 2:
        raise DegenerateStatisticsError("need at least 2 samples to estimate a variance")
    if x.shape[0] < MIN_RECOMMENDED_SAMPLES:
        warnings.warn(f"estimating BN statistics from only {x.shape[0]} samples "
                      f"(< {MIN_RECOMMENDED_SAMPLES}); estimates will be noisy", SmallTargetWarning, stacklevel=2)

    work = model.clone()
    for bn in work.bn_layers:
        bn.eval_stats = None
        bn.active_domain = None
    out: dict[str, BnStats] = {}

    if mode == SIMULTANEOUS:
        accs = {bn.name: WelfordAccumulator.empty(bn.num_features) for bn in bns}
        for chunk in _chunks(x, chunk_size):
            h = chunk
            prev = 0
            for bn, pos in zip(bns, positions):
                h = work.run_range(h, prev, pos)
                accs[bn.name] = accs[bn.name].update(feature_rows(h))
                prev = pos
        return {name: BnStats.from_accumulator(acc) for name, acc in accs.items()}

    for bn, pos in zip(bns, positions):
        acc = WelfordAccumulator.empty(bn.num_features)
        for chunk in _chunks(x, chunk_size):
            acc = acc.update(feature_rows(work.run_range(chunk, 0, pos)))
        stats = BnStats.from_accumulator(acc)
        out[bn.name] = stats
        work[bn.name].eval_stats = (stats.mean, stats.var)
    return out


def apply_domain(model: Model, bank: BnStatsBank, domain_id: str) -> Model:
    """Return a copy of ``model`` whose BN layers normalize with ``domain_id``'s statistics.

    Learnable parameters and the running statistics are copied unchanged.
    """
    entries = {bn.name: bank.get(bn.name, domain_id) for bn in model.bn_layers}
    out = model.clone()
    for bn in out.bn_layers:
        stats = entries[bn.name]
        if stats.mean.shape != (bn.num_features,):
            raise DimensionError(f"{bn.name}: bank entry has {stats.mean.shape[0]} features, "
                                 f"layer has {bn.num_features}")
        bn.eval_stats = (stats.mean.copy(), stats.var.copy())
        bn.active_domain = domain_id
    return out


def adapt(model: Model, target, domain_id: str, mode: str = SEQUENTIAL,
          bank: BnStatsBank | None = None) -> tuple[Model, BnStatsBank]:
    """Estimate ``target``'s BN statistics and return the model switched to them.

    ``bank`` (if given) is copied and extended; the original is not modified.
    """
    entries = estimate_domain_stats(model, target, mode=mode)
    bank = bank.copy() if bank is not None else BnStatsBank()
    bank.update(domain_id, entries)
    log.info("adapted %d BN layers to domain %s", len(entries), domain_id)
    return apply_domain(model, bank, domain_id), bank
