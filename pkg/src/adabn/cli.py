"""Command-line entry point: ``adabn <verb> [options]``.

Exit codes: 0 success, 1 a run check failed, 2 usage or config error, 3 I/O or
file-format error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import analysis, checkpoint
from .benchmark import split_domains
from .config import ExperimentConfig, load_config, parse_config
from .data import DomainDataset, export_csv, load_dataset, save_dataset
from .engine import SEQUENTIAL, SIMULTANEOUS, BnStatsBank, apply_domain, estimate_domain_stats
from .errors import AdaBNError, CheckpointError, ConfigError, IncompleteBankError
from .layers import Model
from .pipeline import (
    budget_subset,
    derive_seed,
    file_sha256,
    generate_domains,
    train_sources,
    write_json,
    write_manifest,
)
from .trainer import Metrics, evaluate

log = logging.getLogger("adabn")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
CSV_EXPORT_LIMIT = 100_000  # values; larger datasets get the binary file only


# --- helpers ---------------------------------------------------------------

def _config(args) -> ExperimentConfig:
    """Load the config and apply command-line overrides before validation and hashing."""
    raw = load_config(getattr(args, "config", None)).model_dump(mode="json")
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        raw["out_dir"] = str(args.out)
    if getattr(args, "estimation_mode", None):
        raw["adapt"]["estimation_mode"] = args.estimation_mode
    if getattr(args, "batches", None) is not None:
        raw["adapt"]["batches"] = args.batches
    return parse_config(raw)


def _prepare_out(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _refuse_existing(paths: list[Path], overwrite: bool) -> None:
    for p in paths:
        if p.exists() and not overwrite:
            raise FileExistsError(f"{p} already exists (pass --overwrite to replace it)")


def _metrics_record(m: Metrics) -> dict:
    return {"accuracy": m.accuracy, "mean_loss": m.mean_loss, "count": m.count,
            "per_class_accuracy": {str(k): v for k, v in sorted(m.per_class_accuracy.items())}}


def _with_stats(model: Model, bank: BnStatsBank, domain_id: str | None) -> Model:
    return model if domain_id is None else apply_domain(model, bank, domain_id)


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.config_hash, "seed": cfg.seed, "experiment_id": cfg.experiment_id}


def _write_datasets(datasets: dict[str, DomainDataset], data_dir: Path, overwrite: bool) -> list[Path]:
    data_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key, ds in datasets.items():
        path = data_dir / f"{key}.adbn"
        save_dataset(ds, path, overwrite=overwrite)
        written.append(path)
        if ds.inputs.size <= CSV_EXPORT_LIMIT:
            csv_path = data_dir / f"{key}.csv"
            _refuse_existing([csv_path], overwrite)
            export_csv(ds, csv_path)
            written.append(csv_path)
    return written


def _load_sources(cfg: ExperimentConfig, data_dir: Path | None) -> tuple[dict[str, DomainDataset], list[Path]]:
    if data_dir is None:
        return generate_domains(cfg), []
    out, inputs = {}, []
    for dom in cfg.data.domains:
        keys = [f"{dom.id}.train", f"{dom.id}.test"] if dom.role == "source" else [dom.id]
        for key in keys:
            path = data_dir / f"{key}.adbn"
            if not path.exists():
                raise FileNotFoundError(f"missing dataset {path}")
            out[key] = load_dataset(path)
            inputs.append(path)
    return out, inputs


# --- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _prepare_out(Path(cfg.out_dir))
    written = _write_datasets(generate_domains(cfg), out / "data", args.overwrite)
    config_in = [Path(args.config)] if args.config else []
    write_manifest(out, "gen-data", config=cfg, seed=cfg.seed, inputs=config_in, outputs=written)
    print(f"wrote {len(written)} files under {out / 'data'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _prepare_out(Path(cfg.out_dir))
    ckpt_path, log_path = out / "model.ckpt", out / "train_log.tsv"
    _refuse_existing([ckpt_path, log_path], args.overwrite)
    datasets, inputs = _load_sources(cfg, Path(args.data) if args.data else None)
    sources, _, _ = split_domains(cfg, datasets)
    model, bank, history = train_sources(cfg, sources)
    checkpoint.save(checkpoint.Checkpoint(model, bank, _provenance(cfg)), ckpt_path, overwrite=args.overwrite)
    log_path.write_text(history.to_tsv())
    config_in = [Path(args.config)] if args.config else []
    write_manifest(out, "train", config=cfg, seed=cfg.seed, inputs=config_in + inputs,
                   outputs=[ckpt_path, log_path])
    last = history.records[-1] if history.records else None
    if last:
        print(f"trained {len(history.records)} epochs: loss {last.loss:.4f} acc {last.accuracy:.4f} "
              f"val_acc {last.val_accuracy:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    ckpt = checkpoint.load(args.checkpoint)
    data = load_dataset(args.data)
    domain_id = args.domain_id or data.domain_id
    out = Path(args.out)
    _refuse_existing([out], args.overwrite)
    mode = args.estimation_mode or SEQUENTIAL
    seed = args.seed if args.seed is not None else int(ckpt.provenance.get("seed", 0))
    subset = budget_subset(data, args.batches, args.batch_size, derive_seed(seed, "adapt", domain_id))
    entries = estimate_domain_stats(ckpt.model, subset, mode=mode)
    bank = ckpt.bank.copy()
    bank.update(domain_id, entries)
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(checkpoint.Checkpoint(ckpt.model, bank, ckpt.provenance), out, overwrite=args.overwrite)
    write_manifest(out.parent, "adapt", config=None, seed=seed, inputs=[Path(args.checkpoint), Path(args.data)],
                   outputs=[out], extra={"domain_id": domain_id, "estimation_mode": mode,
                                         "batches": args.batches, "samples_used": len(subset)})
    print(f"adapted {len(entries)} BN layers to domain {domain_id!r} from {len(subset)} samples -> {out}")
    return EXIT_OK


def _eval_report(ckpt_path: Path, data_path: Path, domain_id: str | None) -> dict:
    ckpt = checkpoint.load(ckpt_path)
    data = load_dataset(data_path)
    model = _with_stats(ckpt.model, ckpt.bank, domain_id)
    return {
        "checkpoint": {"path": str(ckpt_path), "sha256": file_sha256(ckpt_path)},
        "data": {"path": str(data_path), "sha256": file_sha256(data_path), "domain_id": data.domain_id},
        "stats_domain": domain_id or "running",
        "config_hash": ckpt.provenance.get("config_hash"),
        "seed": ckpt.provenance.get("seed"),
        "metrics": _metrics_record(evaluate(model, data)),
    }


def cmd_eval(args) -> int:
    report = _eval_report(Path(args.checkpoint), Path(args.data), args.domain_id)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        _refuse_existing([out], args.overwrite)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    ckpt = checkpoint.load(args.checkpoint)
    target = load_dataset(args.target)
    source = load_dataset(args.source) if args.source else None
    out = _prepare_out(Path(cfg.out_dir))
    prov = {"config_hash": ckpt.provenance.get("config_hash"), "seed": cfg.seed}
    written = _run_analysis(args.which, cfg, ckpt.model, ckpt.bank, source, target, args.domain_id, out,
                            args.overwrite, prov)
    inputs = [Path(args.checkpoint), Path(args.target)] + ([Path(args.source)] if args.source else [])
    write_manifest(out, f"analyze-{args.which}", config=cfg, seed=cfg.seed, inputs=inputs, outputs=written)
    for p in written:
        print(p)
    return EXIT_OK


def _run_analysis(which: str, cfg: ExperimentConfig, model: Model, bank: BnStatsBank,
                  source: DomainDataset | None, target: DomainDataset, domain_id: str | None, out: Path,
                  overwrite: bool, prov: dict) -> list[Path]:
    a = cfg.analysis
    tag = cfg.experiment_id
    domain_id = domain_id or target.domain_id
    if which in ("divergence", "pilot") and source is None:
        raise ConfigError(f"analysis {which!r} needs --source")
    if which == "divergence":
        if (model.bn_layers[0].name, domain_id) not in bank:
            raise IncompleteBankError(model.bn_layers[0].name, domain_id)
        reports = analysis.feature_divergence_profile(model, source, target, a.layers, bank,
                                                      target_domain=domain_id)
        csv_path, rec_path = out / f"{tag}.divergence.csv", out / f"{tag}.divergence.jsonl"
        _refuse_existing([csv_path, rec_path], overwrite)
        analysis.write_divergence_csv(reports, csv_path)
        _write_records(rec_path, [{**prov, "layer": r.layer_name, "condition": r.condition, "mean": r.mean,
                                   "excluded": r.excluded, "features": r.feature_count} for r in reports])
        return [csv_path, rec_path]
    if which == "pilot":
        result = analysis.pilot_separability(model, [source, target], a.layers, a.batch_size,
                                             derive_seed(cfg.seed, "pilot"), a.pilot_min_batches)
        vec_path, rec_path = out / f"{tag}.pilot_vectors.csv", out / f"{tag}.pilot.jsonl"
        _refuse_existing([vec_path, rec_path], overwrite)
        analysis.write_vectors_csv(result.vectors, vec_path)
        _write_records(rec_path, [{**prov, "layer": k, "probe_accuracy": v, "test_vectors": result.test_count}
                                  for k, v in result.accuracy.items()])
        return [vec_path, rec_path]
    if which == "sensitivity":
        counts = [n for n in a.batch_counts] + [analysis.ALL]
        result = analysis.sensitivity_sweep(model, target, counts, a.batch_size, a.trials,
                                            derive_seed(cfg.seed, "sweep"), cfg.adapt.estimation_mode)
        csv_path, rec_path = out / f"{tag}.sensitivity.csv", out / f"{tag}.sensitivity.jsonl"
        _refuse_existing([csv_path, rec_path], overwrite)
        analysis.write_sweep_csv(result, csv_path)
        _write_records(rec_path, [{**prov, "batch_count": r.batch_count, "mean_accuracy": r.mean_accuracy,
                                   "std_accuracy": r.std_accuracy, "trials": r.trials,
                                   "with_replacement": r.with_replacement} for r in result.rows]
                       + [{**prov, "batch_count": 0, "mean_accuracy": result.baseline_accuracy,
                           "std_accuracy": 0.0, "trials": 1, "with_replacement": False}])
        return [csv_path, rec_path]
    raise ConfigError(f"unknown analysis {which!r}")


def _write_records(path: Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def cmd_repro(args) -> int:
    """gen-data -> train -> adapt -> eval -> analyze, all from one config and seed."""
    cfg = _config(args)
    out = _prepare_out(Path(cfg.out_dir))
    prov = _provenance(cfg)
    datasets = generate_domains(cfg)
    written = _write_datasets(datasets, out / "data", args.overwrite)
    sources, tests, targets = split_domains(cfg, datasets)

    ckpt_path, adapted_path, log_path = out / "model.ckpt", out / "model.adapted.ckpt", out / "train_log.tsv"
    _refuse_existing([ckpt_path, adapted_path, log_path], args.overwrite)
    model, bank, history = train_sources(cfg, sources)
    checkpoint.save(checkpoint.Checkpoint(model, bank, prov), ckpt_path, overwrite=args.overwrite)
    log_path.write_text(history.to_tsv())
    source_bank = bank

    adapted_bank = bank.copy()
    for tgt in targets:
        subset = budget_subset(tgt, cfg.adapt.batches, cfg.adapt.batch_size,
                               derive_seed(cfg.seed, "adapt", tgt.domain_id))
        adapted_bank.update(tgt.domain_id, estimate_domain_stats(model, subset, mode=cfg.adapt.estimation_mode))
    checkpoint.save(checkpoint.Checkpoint(model, adapted_bank, prov), adapted_path, overwrite=args.overwrite)
    written += [ckpt_path, adapted_path, log_path]

    rows = []
    checks = []
    for ds in tests:
        plain = evaluate(model, ds)
        own = evaluate(_with_stats(model, source_bank, ds.domain_id), ds)
        rows.append({"domain": ds.domain_id, "split": "test", "method": "source_bn", **_metrics_record(plain)})
        rows.append({"domain": ds.domain_id, "split": "test", "method": "adabn", **_metrics_record(own)})
        if len(sources) == 1:
            checks.append({"name": f"source_unchanged[{ds.domain_id}]", "value": own.accuracy - plain.accuracy,
                           "threshold": 0.0, "passed": own.accuracy == plain.accuracy})
    for tgt in targets:
        base = evaluate(model, tgt)
        ada = evaluate(apply_domain(model, adapted_bank, tgt.domain_id), tgt)
        rows.append({"domain": tgt.domain_id, "split": "all", "method": "source_bn", **_metrics_record(base)})
        rows.append({"domain": tgt.domain_id, "split": "all", "method": "adabn", **_metrics_record(ada)})
        gain = ada.accuracy - base.accuracy
        checks.append({"name": f"adaptation_gain[{tgt.domain_id}]", "value": gain,
                       "threshold": cfg.checks.min_adaptation_gain,
                       "passed": gain >= cfg.checks.min_adaptation_gain})

    results_csv = out / "results.csv"
    with open(results_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_hash", "seed", "domain", "split", "method", "accuracy", "mean_loss", "count"])
        for r in rows:
            w.writerow([cfg.config_hash, cfg.seed, r["domain"], r["split"], r["method"], repr(r["accuracy"]),
                        repr(r["mean_loss"]), r["count"]])
    written.append(results_csv)

    a = cfg.analysis
    for tgt in targets:
        which = [w for w in ("divergence", "pilot", "sensitivity") if getattr(a, w)]
        for kind in which:
            sub = out / "analysis" / tgt.domain_id
            sub.mkdir(parents=True, exist_ok=True)
            if kind == "sensitivity" and len(tgt) < max(a.batch_counts) * a.batch_size:
                log.warning("target %s smaller than the largest sweep budget; sampling with replacement",
                            tgt.domain_id)
            paths = _run_analysis(kind, cfg, model, adapted_bank, tests[0] if kind == "divergence" else sources[0],
                                  tgt, tgt.domain_id, sub, args.overwrite, prov)
            written += paths
            checks += _analysis_checks(kind, cfg, paths[-1], tgt.domain_id)

    checks_path = out / "checks.json"
    write_json(checks_path, {**prov, "checks": checks, "passed": all(c["passed"] for c in checks)})
    written.append(checks_path)
    config_in = [Path(args.config)] if args.config else []
    write_manifest(out, "repro", config=cfg, seed=cfg.seed, inputs=config_in, outputs=written)
    _print_table(rows, checks)
    return EXIT_OK if all(c["passed"] for c in checks) else EXIT_CHECK_FAILED


def _analysis_checks(kind: str, cfg: ExperimentConfig, records_path: Path, domain: str) -> list[dict]:
    records = [json.loads(line) for line in records_path.read_text().splitlines()]
    out = []
    if kind == "divergence":
        by = {(r["layer"], r["condition"]): r["mean"] for r in records}
        for layer in dict.fromkeys(r["layer"] for r in records):
            before, after = by[(layer, analysis.BEFORE)], by[(layer, analysis.AFTER)]
            ratio = after / before if before > 0 else float("inf")
            out.append({"name": f"divergence_ratio[{domain}/{layer}]", "value": ratio,
                        "threshold": cfg.checks.max_divergence_ratio,
                        "passed": ratio < cfg.checks.max_divergence_ratio})
    elif kind == "pilot":
        for r in records:
            out.append({"name": f"pilot_accuracy[{domain}/{r['layer']}]", "value": r["probe_accuracy"],
                        "threshold": cfg.checks.min_pilot_accuracy,
                        "passed": r["probe_accuracy"] >= cfg.checks.min_pilot_accuracy})
    elif kind == "sensitivity":
        by = {r["batch_count"]: r for r in records}
        smallest = min(k for k in by if isinstance(k, int) and k > 0)
        value = by[smallest]["mean_accuracy"] - by[0]["mean_accuracy"]
        out.append({"name": f"one_batch_beats_baseline[{domain}]", "value": value, "threshold": 0.0,
                    "passed": value >= 0.0})
    return out


def _print_table(rows: list[dict], checks: list[dict]) -> None:
    print(f"{'domain':<12} {'split':<6} {'method':<10} {'accuracy':>9}")
    for r in rows:
        print(f"{r['domain']:<12} {r['split']:<6} {r['method']:<10} {r['accuracy']:>9.4f}")
    for c in checks:
        print(f"[{'PASS' if c['passed'] else 'FAIL'}] {c['name']}: {c['value']:.4f} (threshold {c['threshold']})")


def cmd_describe(args) -> int:
    sys.stdout.write(checkpoint.describe(args.checkpoint))
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adabn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, out_help="run directory"):
        if config:
            p.add_argument("--config", help="experiment config (JSON) or a run manifest")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help=out_help)
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")

    def estimation(p):
        p.add_argument("--estimation-mode", choices=[SEQUENTIAL, SIMULTANEOUS])
        p.add_argument("--batches", type=int, help="estimate from this many random target mini-batches")

    p = sub.add_parser("gen-data", help="generate the configured domain datasets")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the source model")
    common(p)
    p.add_argument("--data", help="directory of datasets from gen-data (default: regenerate from config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="estimate a domain's BN statistics into a new checkpoint")
    common(p, config=False, out_help="output checkpoint path")
    estimation(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="target dataset file")
    p.add_argument("--domain-id", help="bank key (default: the dataset's domain id)")
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain-id", help="bank domain whose statistics to use (default: running statistics)")
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="divergence, pilot separability or sensitivity analysis")
    common(p)
    estimation(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", help="source dataset file")
    p.add_argument("--target", required=True, help="target dataset file")
    p.add_argument("--domain-id", help="bank domain for the adapted condition (default: target's domain id)")
    p.add_argument("--which", required=True, choices=["divergence", "pilot", "sensitivity"])
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("repro", help="full pipeline: gen-data, train, adapt, eval, analyze")
    common(p)
    estimation(p)
    p.set_defaults(func=cmd_repro)

    p = sub.add_parser("describe-checkpoint", help="print a checkpoint header")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_describe)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (AdaBNError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
