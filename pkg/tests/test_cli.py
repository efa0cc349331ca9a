import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from adabn import checkpoint
from adabn.cli import main
from adabn.config import ExperimentConfig
from adabn.data import load_dataset

SMALL = {
    "experiment_id": "small",
    "seed": 3,
    "data": {"source_per_class": 400, "source_test_per_class": 100, "target_per_class": 400},
    "train": {"epochs": 15},
    "analysis": {"batch_counts": [1, 4], "trials": 3},
}


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _tree_hashes(root):
    return {str(p.relative_to(root)): _sha(p) for p in sorted(Path(root).rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, small_config):
    """gen-data then train --data, in one run directory."""
    out = tmp_path_factory.mktemp("run")
    assert main(["gen-data", "--config", str(small_config), "--out", str(out)]) == 0
    assert main(["train", "--config", str(small_config), "--out", str(out), "--data", str(out / "data")]) == 0
    return out


def test_gen_data_writes_datasets_and_manifest(trained):
    data = trained / "data"
    assert sorted(p.name for p in data.glob("*.adbn")) == ["source.test.adbn", "source.train.adbn", "target.adbn"]
    assert load_dataset(data / "target.adbn").domain_id == "target"
    manifest = json.loads((trained / "manifest.gen-data.json").read_text())
    assert manifest["seed"] == 3 and manifest["config_hash"] == ExperimentConfig.model_validate(SMALL).config_hash
    for entry in manifest["outputs"]:
        assert _sha(trained / entry["path"]) == entry["sha256"]


def test_train_outputs(trained):
    ckpt = checkpoint.load(trained / "model.ckpt")
    assert ckpt.provenance["seed"] == 3
    assert ckpt.bank.domains() == ["source"]
    assert len((trained / "train_log.tsv").read_text().splitlines()) == 1 + 15


def test_train_refuses_overwrite(trained, small_config, capsys):
    code = main(["train", "--config", str(small_config), "--out", str(trained), "--data", str(trained / "data")])
    assert code == 3
    assert "--overwrite" in capsys.readouterr().err


def test_adapt_eval_pipeline(trained, capsys):
    before = _tree_hashes(trained)
    adapted = trained / "adapted" / "model.ckpt"
    assert main(["adapt", "--checkpoint", str(trained / "model.ckpt"), "--data", str(trained / "data/target.adbn"),
                 "--out", str(adapted)]) == 0
    capsys.readouterr()
    # inputs untouched
    assert all(_sha(trained / k) == v for k, v in before.items())

    argv = ["eval", "--checkpoint", str(adapted), "--data", str(trained / "data/target.adbn")]
    assert main(argv + ["--domain-id", "target"]) == 0
    first = capsys.readouterr().out
    assert main(argv + ["--domain-id", "target"]) == 0
    assert capsys.readouterr().out == first
    assert main(argv) == 0
    plain = json.loads(capsys.readouterr().out)
    report = json.loads(first)
    assert report["seed"] == 3 and report["config_hash"] == plain["config_hash"] is not None
    assert report["metrics"]["accuracy"] > plain["metrics"]["accuracy"] + 0.10


def test_eval_report_file_is_byte_identical(trained, tmp_path, capsys):
    args = ["eval", "--checkpoint", str(trained / "model.ckpt"), "--data", str(trained / "data/source.test.adbn")]
    assert main(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_identity_adaptation_matches_plain_eval(trained, tmp_path, capsys):
    out = tmp_path / "self.ckpt"
    source = trained / "data/source.train.adbn"
    assert main(["adapt", "--checkpoint", str(trained / "model.ckpt"), "--data", str(source),
                 "--domain-id", "source_est", "--out", str(out)]) == 0
    capsys.readouterr()
    test = str(trained / "data/source.test.adbn")
    main(["eval", "--checkpoint", str(out), "--data", test])
    plain = json.loads(capsys.readouterr().out)["metrics"]["accuracy"]
    main(["eval", "--checkpoint", str(out), "--data", test, "--domain-id", "source_est"])
    est = json.loads(capsys.readouterr().out)["metrics"]["accuracy"]
    # running averages versus exact source moments: a small gap at most
    assert abs(est - plain) <= 0.02
    main(["eval", "--checkpoint", str(out), "--data", test, "--domain-id", "source"])
    assert json.loads(capsys.readouterr().out)["metrics"]["accuracy"] == plain


def test_adapt_with_batch_budget(trained, tmp_path, capsys):
    out = tmp_path / "budget.ckpt"
    assert main(["adapt", "--checkpoint", str(trained / "model.ckpt"), "--data", str(trained / "data/target.adbn"),
                 "--batches", "2", "--estimation-mode", "simultaneous", "--out", str(out)]) == 0
    manifest = json.loads((tmp_path / "manifest.adapt.json").read_text())
    assert manifest["samples_used"] == 128 and manifest["estimation_mode"] == "simultaneous"
    assert checkpoint.load(out).bank.get("bn1", "target").count == 128


def test_adapt_changes_only_bank(trained, tmp_path, capsys):
    out = tmp_path / "a.ckpt"
    main(["adapt", "--checkpoint", str(trained / "model.ckpt"), "--data", str(trained / "data/target.adbn"),
          "--out", str(out)])
    diffs = checkpoint.diff_checkpoints(checkpoint.load(trained / "model.ckpt"), checkpoint.load(out))
    assert diffs and all(d.startswith(("bank_mean:", "bank_var:")) and d.endswith("@target") for d in diffs)


@pytest.mark.parametrize("which", ["divergence", "pilot", "sensitivity"])
def test_analyze(trained, small_config, tmp_path, which, capsys):
    adapted = tmp_path / "a.ckpt"
    main(["adapt", "--checkpoint", str(trained / "model.ckpt"), "--data", str(trained / "data/target.adbn"),
          "--out", str(adapted)])
    source = "source.test.adbn" if which == "divergence" else "source.train.adbn"
    code = main(["analyze", "--config", str(small_config), "--out", str(tmp_path / "an"), "--which", which,
                 "--checkpoint", str(adapted), "--source", str(trained / "data" / source),
                 "--target", str(trained / "data/target.adbn")])
    assert code == 0
    records = [json.loads(line) for line in (tmp_path / "an" / f"small.{which}.jsonl").read_text().splitlines()]
    assert records and all(r["seed"] == 3 and r["config_hash"] for r in records)
    assert (tmp_path / "an" / f"manifest.analyze-{which}.json").exists()


def test_analyze_divergence_without_bank_entry(trained, small_config, tmp_path, capsys):
    code = main(["analyze", "--config", str(small_config), "--out", str(tmp_path), "--which", "divergence",
                 "--checkpoint", str(trained / "model.ckpt"), "--source", str(trained / "data/source.test.adbn"),
                 "--target", str(trained / "data/target.adbn")])
    assert code == 2
    assert "bn1" in capsys.readouterr().err


def test_describe_checkpoint(trained, capsys):
    assert main(["describe-checkpoint", str(trained / "model.ckpt")]) == 0
    out = capsys.readouterr().out
    assert "bn1@source" in out and "config_hash" in out


@pytest.fixture(scope="module")
def run(tmp_path_factory, small_config):
    out = tmp_path_factory.mktemp("repro")
    code = main(["repro", "--config", str(small_config), "--out", str(out)])
    return out, code


class TestRepro:
    def test_passes_and_writes_table(self, run):
        out, code = run
        assert code == 0
        checks = json.loads((out / "checks.json").read_text())
        assert checks["passed"] and checks["seed"] == 3
        names = {c["name"] for c in checks["checks"]}
        assert {"adaptation_gain[target]", "source_unchanged[source]"} <= names
        lines = (out / "results.csv").read_text().splitlines()
        assert lines[0].startswith("config_hash,seed,domain,split,method,accuracy")
        assert {tuple(line.split(",")[2:5]) for line in lines[1:]} == {
            ("source", "test", "source_bn"), ("source", "test", "adabn"),
            ("target", "all", "source_bn"), ("target", "all", "adabn")}

    def test_analysis_outputs(self, run):
        out, _ = run
        names = {p.name for p in (out / "analysis" / "target").iterdir()}
        for which in ("divergence", "pilot", "sensitivity"):
            assert f"small.{which}.jsonl" in names

    def test_rerun_from_manifest_reproduces(self, run, tmp_path, capsys):
        out, _ = run
        again = tmp_path / "again"
        assert main(["repro", "--config", str(out / "manifest.repro.json"), "--out", str(again)]) == 0
        first, second = _tree_hashes(out), _tree_hashes(again)
        # manifests name their own paths and versions; everything else must match byte for byte
        keys = {k for k in first if not k.startswith("manifest.")}
        assert keys == {k for k in second if not k.startswith("manifest.")}
        assert all(first[k] == second[k] for k in keys)

    def test_refuses_to_clobber(self, run, small_config, capsys):
        out, _ = run
        assert main(["repro", "--config", str(small_config), "--out", str(out)]) == 3

    def test_failed_check_exit_code(self, tmp_path, capsys):
        cfg = {**SMALL, "checks": {"min_adaptation_gain": 2.0},
               "analysis": {"divergence": False, "pilot": False, "sensitivity": False}}
        path = tmp_path / "strict.json"
        path.write_text(json.dumps(cfg))
        assert main(["repro", "--config", str(path), "--out", str(tmp_path / "r")]) == 1
        assert "[FAIL] adaptation_gain[target]" in capsys.readouterr().out


class TestErrors:
    def test_unknown_key_reports_path(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train": {"epochs": 1, "momentum": 0.9}}))
        assert main(["gen-data", "--config", str(path), "--out", str(tmp_path)]) == 2
        assert "train.momentum" in capsys.readouterr().err

    def test_bad_value_reports_path(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"data": {"domains": [{"id": "s", "role": "source", "scale_min": -1}]}}))
        assert main(["gen-data", "--config", str(path), "--out", str(tmp_path)]) == 2
        assert "data.domains.0.scale_min" in capsys.readouterr().err

    def test_invalid_json(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["gen-data", "--config", str(path)]) == 2

    def test_missing_checkpoint(self, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", str(tmp_path / "d.adbn")])
        assert code == 3
        assert "nope.ckpt" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, trained, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes((trained / "model.ckpt").read_bytes()[:-10])
        assert main(["describe-checkpoint", str(bad)]) == 0
        assert main(["eval", "--checkpoint", str(bad), "--data", str(trained / "data/target.adbn")]) == 3

    def test_unknown_domain(self, trained, capsys):
        code = main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--data", str(trained / "data/target.adbn"),
                     "--domain-id", "nowhere"])
        assert code == 2
        assert "nowhere" in capsys.readouterr().err

    def test_missing_dataset_directory(self, small_config, tmp_path, capsys):
        code = main(["train", "--config", str(small_config), "--out", str(tmp_path), "--data", str(tmp_path / "x")])
        assert code == 3

    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["adapt"])
        assert info.value.code == 2


def test_seed_changes_results(small_config, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["gen-data", "--config", str(small_config), "--out", str(a)])
    main(["gen-data", "--config", str(small_config), "--out", str(b), "--seed", "4"])
    assert not np.array_equal(load_dataset(a / "data/target.adbn").inputs, load_dataset(b / "data/target.adbn").inputs)
