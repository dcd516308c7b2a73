import json

import numpy as np
import pytest

from timearrow.checkpoint import load_checkpoint
from timearrow.cli import MANIFEST_FILENAME, main, manifest_to_argv
from timearrow.data import load_dataset
from timearrow.metrics import read_runs_csv

SYNTH = ["synth", "--components", "4", "--timepoints", "16", "--subjects-per-class", "8",
         "--classes", "2", "--asymmetry", "1.5", "--seed", "7"]

TINY_MODEL = ["--window-len", "8", "--conv-channels", "3,3,3", "--conv-kernels", "2,2,2",
              "--encoder-dim", "6", "--lstm-hidden", "5", "--attention-dim", "5",
              "--head-hidden", "5"]
FAST_TRAIN = ["--epochs", "2", "--patience", "2", "--batch", "8"]


@pytest.fixture
def dataset_dir(tmp_path):
    out = tmp_path / "data"
    assert main(SYNTH + ["--out", str(out)]) == 0
    return out


def read_manifest(directory):
    return json.loads((directory / MANIFEST_FILENAME).read_text())


def test_synth_writes_dataset_and_manifest(dataset_dir):
    ds = load_dataset(dataset_dir)
    assert len(ds) == 16
    assert ds.components == 4
    manifest = read_manifest(dataset_dir)
    assert manifest["command"] == "synth"
    assert manifest["flags"]["seed"] == 7
    assert "manifest.tsv" in manifest["outputs"]


def test_synth_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(SYNTH + ["--out", str(a)]) == 0
    assert main(SYNTH + ["--out", str(b)]) == 0
    for name in sorted(p.name for p in a.iterdir() if p.name != MANIFEST_FILENAME):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_synth_rejects_bad_flags(tmp_path):
    code = main(["synth", "--out", str(tmp_path / "x"), "--noise", "-1"])
    assert code == 1


def test_manifest_replay_reproduces_synth(tmp_path, dataset_dir):
    manifest = read_manifest(dataset_dir)
    replay_dir = tmp_path / "replay"
    argv = manifest_to_argv(manifest, overrides={"out": str(replay_dir)})
    assert main(argv) == 0
    for name in sorted(p.name for p in dataset_dir.iterdir() if p.name != MANIFEST_FILENAME):
        assert (dataset_dir / name).read_bytes() == (replay_dir / name).read_bytes()


def test_pretrain_writes_checkpoint_history_manifest(tmp_path, dataset_dir, caplog):
    out = tmp_path / "pre.ckpt"
    code = main(["pretrain", "--data", str(dataset_dir), "--out", str(out),
                 "--val-size", "4", "--test-size", "4", "--seed", "1"]
                + TINY_MODEL + FAST_TRAIN)
    assert code == 0
    ckpt = load_checkpoint(out)
    assert ckpt.metadata["phase"] == "pretext"
    assert "test_auc" in ckpt.metadata
    history = (tmp_path / "pre.ckpt.history.csv").read_text().splitlines()
    assert history[0] == "epoch,train_loss,val_auc"
    assert len(history) - 1 == int(ckpt.metadata["epochs_run"])
    manifest = read_manifest(tmp_path)
    assert manifest["command"] == "pretrain"


def test_pretrain_logs_pretext_counts(tmp_path, dataset_dir, caplog):
    import logging

    out = tmp_path / "pre.ckpt"
    with caplog.at_level(logging.INFO):
        main(["pretrain", "--data", str(dataset_dir), "--out", str(out),
              "--val-size", "4", "--seed", "1"] + TINY_MODEL + FAST_TRAIN)
    assert "32 samples" in caplog.text  # 16 subjects -> 32 pretext samples
    assert "2 windows per subject" in caplog.text  # 16 timepoints / window 8


def test_pretrain_checkpoints_are_deterministic(tmp_path, dataset_dir):
    args = ["pretrain", "--data", str(dataset_dir), "--val-size", "4", "--seed", "1"] \
        + TINY_MODEL + FAST_TRAIN
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def finetune_args(dataset_dir, out, init="scratch"):
    return (["finetune", "--data", str(dataset_dir), "--out", str(out), "--init", init,
             "--val-size", "4", "--test-size", "4", "--seed", "2"]
            + TINY_MODEL + FAST_TRAIN)


def test_finetune_scratch_single_run(tmp_path, dataset_dir):
    out = tmp_path / "ft"
    assert main(finetune_args(dataset_dir, out)) == 0
    folds = (out / "folds.csv").read_text().splitlines()
    assert folds[0] == "fold,best_val_auc,test_auc,epochs_to_best"
    assert len(folds) == 2
    ckpt = load_checkpoint(out / "best.ckpt")
    assert ckpt.metadata["phase"] == "finetune"


def test_finetune_kfold(tmp_path, dataset_dir):
    out = tmp_path / "ft"
    assert main(finetune_args(dataset_dir, out) + ["--k", "2"]) == 0
    folds = (out / "folds.csv").read_text().splitlines()
    assert len(folds) == 3  # header + 2 folds


def test_finetune_from_checkpoint_and_balance(tmp_path, dataset_dir):
    pre = tmp_path / "pre.ckpt"
    assert main(["pretrain", "--data", str(dataset_dir), "--out", str(pre),
                 "--val-size", "4", "--seed", "1"] + TINY_MODEL + FAST_TRAIN) == 0
    out = tmp_path / "ft"
    code = main(finetune_args(dataset_dir, out, init=str(pre))
                + ["--balance", "rotate", "--trial", "1"])
    assert code == 0


def test_finetune_rejects_missing_checkpoint(tmp_path, dataset_dir):
    out = tmp_path / "ft"
    assert main(finetune_args(dataset_dir, out, init=str(tmp_path / "nope.ckpt"))) == 1


def test_sweep_and_report(tmp_path, dataset_dir):
    pre = tmp_path / "pre.ckpt"
    assert main(["pretrain", "--data", str(dataset_dir), "--out", str(pre),
                 "--val-size", "4", "--seed", "1"] + TINY_MODEL + FAST_TRAIN) == 0
    sweep_dir = tmp_path / "sweep"
    code = main(["sweep", "--data", str(dataset_dir), "--out", str(sweep_dir),
                 "--ptr-init", str(pre), "--sizes", "2,3", "--repeats", "2",
                 "--val-size", "4", "--test-size", "4", "--seed", "3"]
                + TINY_MODEL + FAST_TRAIN)
    assert code == 0
    rows = read_runs_csv(sweep_dir / "runs.csv")
    assert len(rows) == 8  # 2 sizes x 2 arms x 2 repeats
    summary = (sweep_dir / "summary.csv").read_text().splitlines()
    assert summary[0] == "dataset,arm,subjects_per_class,mean_auc,median_auc,n_runs"
    assert len(summary) == 5  # header + one row per (size, arm)
    comparison = (sweep_dir / "comparison.csv").read_text().splitlines()
    assert "median_delta" in comparison[0]
    assert len(comparison) == 3  # header + one row per size

    report_dir = tmp_path / "report"
    assert main(["report", "--runs", str(sweep_dir / "runs.csv"),
                 "--out", str(report_dir)]) == 0
    svg = report_dir / "synthetic.svg"
    assert svg.exists()
    assert b"<svg" in svg.read_bytes()[:500]

    # medians in the summary equal medians recomputable from the runs
    import csv

    with open(report_dir / "summary.csv") as fh:
        summary_rows = list(csv.DictReader(fh))
    for row in summary_rows:
        cell = [r.test_auc for r in rows
                if r.arm == row["arm"] and r.subjects_per_class == int(row["subjects_per_class"])]
        assert float(row["median_auc"]) == float(np.median(cell))


def test_report_is_byte_deterministic(tmp_path, dataset_dir):
    runs_csv = tmp_path / "runs.csv"
    runs_csv.write_text(
        "dataset,arm,subjects_per_class,repeat,test_auc\n"
        "synthetic,PTR,15,0,0.8\nsynthetic,PTR,15,1,0.9\n"
        "synthetic,NPT,15,0,0.6\nsynthetic,NPT,15,1,0.7\n")
    a, b = tmp_path / "ra", tmp_path / "rb"
    assert main(["report", "--runs", str(runs_csv), "--out", str(a)]) == 0
    assert main(["report", "--runs", str(runs_csv), "--out", str(b)]) == 0
    assert (a / "synthetic.svg").read_bytes() == (b / "synthetic.svg").read_bytes()
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()


def test_report_single_run_degenerate_box(tmp_path):
    runs_csv = tmp_path / "runs.csv"
    runs_csv.write_text("dataset,arm,subjects_per_class,repeat,test_auc\n"
                        "solo,PTR,15,0,0.75\n")
    out = tmp_path / "r"
    assert main(["report", "--runs", str(runs_csv), "--out", str(out)]) == 0
    assert (out / "solo.svg").exists()


def test_gradcheck_passes_and_corrupt_hook_fails(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "end_to_end_model" in out and "FAIL" not in out
    assert main(["gradcheck", "--corrupt-op", "matmul"]) == 1
    out = capsys.readouterr().out
    assert "FAIL matmul" in out


def test_unknown_flag_exits_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out", str(tmp_path / "x"), "--bogus-flag", "1"])
    assert exc.value.code == 1


def test_missing_data_exits_1(tmp_path):
    code = main(["pretrain", "--data", str(tmp_path / "absent"), "--out",
                 str(tmp_path / "o.ckpt"), "--val-size", "2"] + TINY_MODEL + FAST_TRAIN)
    assert code == 1
