import csv
import json
import math

import pytest

from popgraph.cli import RunConfig, exit_code, main
from popgraph.cohort import load_cohort, make_folds, subsample_labels, synthesize_cohort
from popgraph.errors import ConfigError, DivergenceError, IncompatibleCheckpoint, ValidationError

FAST = ["--folds", "holdout:1", "--epochs", "4"]


def run(*argv):
    return main([str(a) for a in argv])


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generate_round_trip_and_determinism(tmp_path):
    assert run("generate", "--preset", "static", "--n", 40, "--seed", 7, "--out", tmp_path / "a") == 0
    assert run("generate", "--preset", "static", "--n", 40, "--seed", 7, "--out", tmp_path / "b") == 0
    cohort = load_cohort(tmp_path / "a" / "schema.json", tmp_path / "a" / "records.jsonl")
    assert len(cohort.records) == 40
    assert cohort.ids == synthesize_cohort(7, 40, "static").ids
    for name in ("schema.json", "records.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generate_rejects_small_n(tmp_path, capsys):
    assert run("generate", "--n", 5, "--out", tmp_path) == 3
    assert "at least 20" in capsys.readouterr().err


def test_exit_code_mapping():
    assert exit_code(ConfigError("x")) == 3
    assert exit_code(ValidationError("x")) == 3
    assert exit_code(FileNotFoundError("x")) == 4
    assert exit_code(DivergenceError("x")) == 5
    assert exit_code(IncompatibleCheckpoint("x")) == 6
    assert exit_code(RuntimeError("x")) == 1


def test_missing_records_file(tmp_path):
    assert run("generate", "--n", 20, "--out", tmp_path / "g") == 0
    assert run("pretrain", "--schema", tmp_path / "g" / "schema.json", "--records", tmp_path / "nope.jsonl", "--out", tmp_path / "p") == 4


def test_pretrain_finetune_evaluate(tmp_path):
    pt, ft = tmp_path / "pt", tmp_path / "ft"
    assert run("pretrain", "--n", 40, *FAST, "--out", pt) == 0
    assert (pt / "fold0" / "pretrain.ckpt").exists() and (pt / "run_config.json").exists()
    with open(pt / "fold0" / "pretrain_metrics.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["epoch", "split", "metric", "value"]
    assert run("finetune", "--n", 40, *FAST, "--checkpoint", pt, "--label-ratio", 0.1, "--out", ft) == 0
    assert (ft / "fold0" / "finetune_r0.1.ckpt").exists()
    assert run("evaluate", "--config", ft / "run_config.json", "--checkpoint", pt, "--out", tmp_path / "ev") == 0
    rows = list(csv.DictReader(open(tmp_path / "ev" / "evaluation.csv")))
    assert {r["checkpoint"] for r in rows} == {"pretrain.ckpt", "pretrain_final.ckpt"}
    assert all(math.isfinite(float(r["rmse"])) for r in rows)


def test_finetune_checkpoint_errors(tmp_path):
    pt = tmp_path / "pt"
    assert run("pretrain", "--n", 40, *FAST, "--out", pt) == 0
    # other model width: fingerprint mismatch
    assert run("finetune", "--n", 40, *FAST, "--checkpoint", pt, "--model", "d_discrete=8", "--out", tmp_path / "a") == 6
    # other schema: the time-series preset cannot use a static checkpoint
    assert run("finetune", "--preset", "timeseries", "--n", 40, *FAST, "--checkpoint", pt, "--out", tmp_path / "b") == 6
    assert run("finetune", "--n", 40, *FAST, "--checkpoint", tmp_path / "missing", "--out", tmp_path / "c") == 6
    assert run("finetune", "--n", 40, *FAST, "--out", tmp_path / "d") == 3


def test_train_logs_labeled_count(tmp_path):
    assert run("train", "--n", 60, *FAST, "--label-ratio", 0.1, "--seed", 2, "--out", tmp_path) == 0
    row = next(csv.DictReader(open(tmp_path / "summary.csv")))
    cohort = synthesize_cohort(2, 60, "static")
    fold = make_folds(cohort.ids, RunConfig(folds="holdout:1").fold_scheme(), 2).folds[0]
    expected = len(subsample_labels(fold.train_ids, cohort.labels(), 0.1, 2))
    assert float(row["labeled"]) == expected


def test_replay_from_run_config_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train", "--n", 40, *FAST, "--label-ratios", 0.5, 1.0, "--variant", "linear", "--out", a) == 0
    cfg = json.loads((a / "run_config.json").read_text())
    assert cfg["variant"] == "linear" and cfg["label_ratios"] == [0.5, 1.0]
    assert run("train", "--config", a / "run_config.json", "--out", b) == 0
    ta, tb = tree_bytes(a), tree_bytes(b)
    ta.pop("run_config.json"), tb.pop("run_config.json")
    assert ta == tb


def test_parallel_folds_match_serial(tmp_path):
    args = ["--n", 40, "--folds", "kfold:3", "--epochs", 2]
    assert run("pretrain", *args, "--out", tmp_path / "s") == 0
    assert run("pretrain", *args, "--parallel-folds", 2, "--out", tmp_path / "p") == 0
    s, p = tree_bytes(tmp_path / "s"), tree_bytes(tmp_path / "p")
    s.pop("run_config.json"), p.pop("run_config.json")
    assert s == p and "fold2/pretrain.ckpt" in s


def test_sweep_table_shape(tmp_path):
    argv = ["sweep", "--n", 40, "--folds", "holdout:1", "--epochs-scale", 0.02, "--label-ratios", 0.1, 1.0]
    assert run(*argv, "--out", tmp_path) == 0
    lines = (tmp_path / "table.csv").read_text().splitlines()
    assert lines[0] == "ratio,metric,SC,FT"
    assert [l.split(",")[:2] for l in lines[1:]] == [["0.1", "ACC"], ["0.1", "AUC"], ["1", "ACC"], ["1", "AUC"]]
    assert all("nan" not in l for l in lines)


def test_sweep_timeseries_has_mask_columns(tmp_path):
    argv = ["sweep", "--preset", "timeseries", "--n", 30, "--folds", "holdout:1", "--epochs-scale", 0.02, "--label-ratios", 1.0]
    assert run(*argv, "--model", "num_graphormer_layers=1", "--out", tmp_path) == 0
    assert (tmp_path / "table.csv").read_text().splitlines()[0] == "ratio,metric,SC,FT:BM,FT:FM"


def test_bad_options():
    with pytest.raises(ConfigError):
        RunConfig(preset="dynamic").validate()
    with pytest.raises(ConfigError):
        RunConfig(label_ratios=[0.0]).validate()
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(SystemExit):
        main(["pretrain", "--mask", "xx"])
