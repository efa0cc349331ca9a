"""Empirical probes of BN statistics across domains.

* :func:`pilot_separability` asks whether mini-batch BN statistics alone
  reveal which domain a batch came from (linear probe accuracy).
* :func:`feature_divergence_profile` measures per-feature symmetric KL
  divergence between source and target activations, before and after
  adaptation.
* :func:`sensitivity_sweep` measures accuracy as a function of how many target
  mini-batches feed the statistic estimate.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DomainDataset
from .engine import (
    SEQUENTIAL,
    BnStatsBank,
    WelfordAccumulator,
    adapt,
    apply_domain,
    estimate_domain_stats,
    feature_rows,
)
from .errors import DegenerateLayerError, PreconditionError
from .layers import Linear, Model
from .tensor import reduce_moments
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

MIN_VARIANCE = 1e-12
BEFORE = "before_adapt"
AFTER = "after_adapt"


def symmetric_kl(mu_i, var_i, mu_j, var_j):
    """Symmetric KL divergence between the Gaussians N(mu_i, var_i) and N(mu_j, var_j).

    Works elementwise on arrays. Raises ``ValueError`` for nonpositive variances.
    """
    mu_i, var_i, mu_j, var_j = (np.asarray(v, dtype=np.float64) for v in (mu_i, var_i, mu_j, var_j))
    if np.any(var_i <= 0) or np.any(var_j <= 0):
        raise ValueError("variances must be strictly positive")
    d2 = (mu_i - mu_j) ** 2

    def kl(m_var, o_var):
        return 0.5 * np.log(o_var / m_var) + (m_var + d2) / (2.0 * o_var) - 0.5

    out = kl(var_i, var_j) + kl(var_j, var_i)
    return float(out) if out.ndim == 0 else out


@dataclass
class DivergenceReport:
    layer_name: str
    condition: str
    divergences: np.ndarray
    excluded: int
    feature_count: int

    @property
    def mean(self) -> float:
        return float(self.divergences.mean())


def default_layers(model: Model) -> list[str]:
    """First and last BN layer: the shallow/deep pair used by the probes."""
    bns = model.bn_layers
    if not bns:
        raise PreconditionError("model has no batch-norm layers")
    return [bns[0].name] if len(bns) == 1 else [bns[0].name, bns[-1].name]


def _layer_moments(model: Model, data: DomainDataset, layers: list[str], chunk: int = 1024):
    accs: dict[str, WelfordAccumulator] = {}
    for i in range(0, len(data), chunk):
        acts = model.activations(data.inputs[i:i + chunk], layers)
        for name, a in acts.items():
            rows = feature_rows(a)
            accs.setdefault(name, WelfordAccumulator.empty(rows.shape[1]))
            accs[name] = accs[name].update(rows)
    return {name: (acc.mean, acc.variance) for name, acc in accs.items()}


def _divergences(src_m, tgt_m, layers: list[str], condition: str) -> list[DivergenceReport]:
    out = []
    for name in layers:
        (mu_s, var_s), (mu_t, var_t) = src_m[name], tgt_m[name]
        keep = (var_s >= MIN_VARIANCE) & (var_t >= MIN_VARIANCE)
        if not keep.any():
            raise DegenerateLayerError(f"{name}: every feature has (near-)zero variance in one of the domains")
        d = symmetric_kl(mu_s[keep], var_s[keep], mu_t[keep], var_t[keep])
        out.append(DivergenceReport(name, condition, np.atleast_1d(d), int((~keep).sum()), keep.size))
    return out


def feature_divergence_profile(model: Model, src: DomainDataset, tgt: DomainDataset,
                               layer_names: list[str] | None = None, bank: BnStatsBank | None = None,
                               source_domain: str | None = None,
                               target_domain: str | None = None) -> list[DivergenceReport]:
    """Per-feature symmetric KL between Gaussian fits of source and target outputs at each layer.

    The ``before`` reports run both domains through ``model`` as given. When a
    bank is supplied, ``after`` reports are added in which the target runs
    through the model switched to ``target_domain`` (default: the target
    dataset's domain id); the source side uses ``source_domain`` from the bank
    when given and the model's own statistics otherwise.
    """
    layers = list(layer_names) if layer_names else default_layers(model)
    src_m = _layer_moments(model, src, layers)
    reports = _divergences(src_m, _layer_moments(model, tgt, layers), layers, BEFORE)
    if bank is not None:
        adapted = apply_domain(model, bank, target_domain or tgt.domain_id)
        src_model = apply_domain(model, bank, source_domain) if source_domain else model
        src_after = src_m if source_domain is None else _layer_moments(src_model, src, layers)
        reports += _divergences(src_after, _layer_moments(adapted, tgt, layers), layers, AFTER)
    return reports


def write_divergence_csv(reports: list[DivergenceReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "condition", "feature", "divergence"])
        for r in reports:
            for i, d in enumerate(r.divergences):
                w.writerow([r.layer_name, r.condition, i, repr(float(d))])


# --- pilot experiment --------------------------------------------------------

@dataclass
class BnStatVector:
    layer_name: str
    domain_id: str
    values: np.ndarray


@dataclass
class PilotResult:
    accuracy: dict[str, float]
    test_count: int
    vectors: list[BnStatVector] = field(default_factory=list)


def batch_stat_vectors(model: Model, data: DomainDataset, layer_names: list[str], batch_size: int,
                       rng: np.random.Generator | None = None) -> list[BnStatVector]:
    """One (mean, variance) vector per BN layer for every complete mini-batch of ``data``.

    Moments are those a training-mode BN layer would compute on its input for
    that batch; the preceding layers run in eval mode.
    """
    positions = {name: model.index(name) for name in layer_names}
    out = []
    for x, _ in data.batches(batch_size, rng, drop_last=True):
        h = x
        prev = 0
        for name in sorted(layer_names, key=positions.get):
            h = model.run_range(h, prev, positions[name])
            prev = positions[name]
            mean, var = reduce_moments(feature_rows(h), 0)
            out.append(BnStatVector(name, data.domain_id, np.concatenate([mean, var])))
    return out


def _stratified_split(labels: np.ndarray, train_fraction: float, rng: np.random.Generator):
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        cut = int(round(len(idx) * train_fraction))
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    return np.concatenate(train_idx), np.concatenate(test_idx)


def linear_probe(features: np.ndarray, labels: np.ndarray, class_count: int, seed: int,
                 train_fraction: float = 0.8, epochs: int = 200, lr: float = 0.1) -> tuple[float, int]:
    """Held-out accuracy of a softmax-regression probe trained with the package's SGD."""
    rng = np.random.default_rng(seed)
    tr, te = _stratified_split(labels, train_fraction, rng)
    mu = features[tr].mean(axis=0)
    sd = features[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    z = (features - mu) / sd
    probe = Model([Linear("probe", z.shape[1], class_count, np.random.default_rng(seed))], (z.shape[1],))
    probe.layers[0].params["weight"][:] = 0.0
    train_set = DomainDataset("probe", z[tr], labels[tr], class_count)
    cfg = TrainConfig(base_lr=lr, lr_drop_factor=0.1, lr_drop_every=max(epochs, 1), epochs=epochs,
                      batch_size=min(16, max(2, len(tr))), seed=seed, val_fraction=0.0)
    probe, _ = train(probe, train_set, cfg)
    pred = probe.forward(z[te]).argmax(axis=1)
    return float((pred == labels[te]).mean()), len(te)


def pilot_separability(model: Model, domains: list[DomainDataset], layer_names: list[str] | None = None,
                       batch_size: int = 64, probe_seed: int = 0, min_batches: int = 20,
                       train_fraction: float = 0.8) -> PilotResult:
    """Domain-classification accuracy of a linear probe on mini-batch BN statistics."""
    if len(domains) < 2:
        raise PreconditionError("need at least two domains")
    layers = list(layer_names) if layer_names else default_layers(model)
    rng = np.random.default_rng(probe_seed)
    vectors: list[BnStatVector] = []
    for ds in domains:
        n_batches = len(ds) // batch_size
        if n_batches < min_batches:
            raise PreconditionError(f"domain {ds.domain_id!r} yields {n_batches} mini-batches of {batch_size}, "
                                    f"need at least {min_batches}")
        vectors += batch_stat_vectors(model, ds, layers, batch_size, rng)
    domain_index = {ds.domain_id: i for i, ds in enumerate(domains)}
    if len(domain_index) != len(domains):
        raise PreconditionError("domain ids must be distinct")
    accuracy = {}
    test_count = 0
    for name in layers:
        rows = [v for v in vectors if v.layer_name == name]
        x = np.stack([v.values for v in rows])
        y = np.array([domain_index[v.domain_id] for v in rows])
        accuracy[name], test_count = linear_probe(x, y, len(domains), probe_seed, train_fraction)
    return PilotResult(accuracy, test_count, vectors)


def write_vectors_csv(vectors: list[BnStatVector], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "domain_id", "batch", "values"])
        counters: dict[tuple[str, str], int] = {}
        for v in vectors:
            key = (v.layer_name, v.domain_id)
            counters[key] = counters.get(key, -1) + 1
            w.writerow([v.layer_name, v.domain_id, counters[key], " ".join(repr(float(a)) for a in v.values)])


# --- target-size sensitivity -------------------------------------------------

ALL = "all"


@dataclass
class SweepRow:
    batch_count: int | str
    mean_accuracy: float
    std_accuracy: float
    trials: int
    with_replacement: bool
    accuracies: list[float]


@dataclass
class SweepResult:
    baseline_accuracy: float
    rows: list[SweepRow]

    def row(self, batch_count) -> SweepRow:
        for r in self.rows:
            if r.batch_count == batch_count:
                return r
        raise KeyError(batch_count)


def sensitivity_sweep(model: Model, target: DomainDataset, batch_counts: list, batch_size: int = 64,
                      trials: int = 5, seed: int = 0, mode: str = SEQUENTIAL) -> SweepResult:
    """Accuracy on the whole target set when statistics come from ``n`` random target batches.

    ``batch_counts`` may include ``"all"``, which estimates from the full set in
    its stored order (one trial, identical to :func:`adabn.engine.adapt`). When
    ``n * batch_size`` exceeds the dataset, sampling falls back to drawing with
    replacement and the row records it.
    """
    if trials < 1:
        raise PreconditionError("trials must be >= 1")
    baseline = evaluate(model, target).accuracy
    rows = []
    for n in batch_counts:
        if n == ALL:
            adapted, _ = adapt(model, target, target.domain_id, mode=mode)
            acc = evaluate(adapted, target).accuracy
            rows.append(SweepRow(ALL, acc, 0.0, 1, False, [acc]))
            continue
        if int(n) < 1:
            raise PreconditionError("batch counts must be positive")
        need = int(n) * batch_size
        replace = need > len(target)
        if replace:
            log.warning("%d batches of %d exceed %d target samples; sampling with replacement",
                        n, batch_size, len(target))
        accs = []
        for trial in range(trials):
            rng = np.random.default_rng([seed, int(n), trial])
            idx = rng.choice(len(target), size=need, replace=replace)
            entries = estimate_domain_stats(model, target.subset(idx), mode=mode)
            bank = BnStatsBank()
            bank.update(target.domain_id, entries)
            accs.append(evaluate(apply_domain(model, bank, target.domain_id), target).accuracy)
        rows.append(SweepRow(int(n), float(np.mean(accs)), float(np.std(accs)), trials, replace, accs))
    return SweepResult(baseline, rows)


def write_sweep_csv(result: SweepResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch_count", "mean_accuracy", "std_accuracy", "trials", "with_replacement"])
        w.writerow(["none", repr(result.baseline_accuracy), "0.0", 1, False])
        for r in result.rows:
            w.writerow([r.batch_count, repr(r.mean_accuracy), repr(r.std_accuracy), r.trials, r.with_replacement])
