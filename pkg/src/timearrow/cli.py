"""Command-line workflow: synthesize data, pretrain on time direction,
fine-tune, sweep subjects-per-class, verify gradients, and report.

Every command writes a ``run_manifest.json`` next to its outputs holding
the fully resolved flag set; replaying a manifest's flags reproduces the
output files byte-identically. Exit codes: 0 success, 1 validation error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

import timearrow
from timearrow import metrics, training
from timearrow.autodiff import ShapeError
from timearrow.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from timearrow.data import (
    DataValidationError,
    SplitSpec,
    SynthConfig,
    balance_classes,
    load_dataset,
    save_dataset,
    subsample_per_class,
    synth_generate,
)
from timearrow.gradcheck import DEFAULT_TOLERANCE, run_gradcheck
from timearrow.metrics import RunRow, compare_arms, read_runs_csv, summarize
from timearrow.network import ConfigError, ModelConfig
from timearrow.training import TrainConfig, TrainingError

__all__ = ["main", "build_parser", "manifest_to_argv", "MANIFEST_FILENAME"]

logger = logging.getLogger(__name__)

MANIFEST_FILENAME = "run_manifest.json"

_VALIDATION_ERRORS = (DataValidationError, ConfigError, CheckpointError, TrainingError,
                      ShapeError, ValueError)


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (validation error) on bad flags instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window-len", type=int, default=20, help="timepoints per window")
    p.add_argument("--epochs", type=int, default=100, help="max training epochs")
    p.add_argument("--lr", type=float, default=2e-4, help="Adam learning rate")
    p.add_argument("--batch", type=int, default=32, help="batch size")
    p.add_argument("--patience", type=int, default=10,
                   help="epochs without val-AUC improvement before stopping")
    p.add_argument("--no-normalize", action="store_true",
                   help="skip per-component z-scoring before windowing")
    p.add_argument("--conv-channels", default="64,128,200", help="conv layer widths")
    p.add_argument("--conv-kernels", default="4,4,3", help="conv kernel sizes")
    p.add_argument("--encoder-dim", type=int, default=256)
    p.add_argument("--lstm-hidden", type=int, default=200)
    p.add_argument("--attention-dim", type=int, default=128)
    p.add_argument("--head-hidden", type=int, default=200)


def build_parser() -> _Parser:
    parser = _Parser(prog="timearrow", description=__doc__)
    parser.add_argument("--version", action="version", version=timearrow.__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--components", type=int, default=53)
    p.add_argument("--timepoints", type=int, default=140)
    p.add_argument("--subjects-per-class", type=int, default=100)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--asymmetry", type=float, default=1.5,
                   help="strength of the time-irreversible innovation term")
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--gaussian-only", action="store_true",
                   help="linear Gaussian AR(2): time-reversible null family")
    p.add_argument("--coeff-jitter", type=float, default=0.08)
    p.add_argument("--ar", default="0.55,0.25;0.25,0.5",
                   help="per-class AR pairs, e.g. '0.55,0.25;0.25,0.5'")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain", help="self-supervised pretraining on time direction")
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--val-size", type=int, default=0,
                   help="validation subjects (0 = 20%% of the dataset)")
    p.add_argument("--test-size", type=int, default=0,
                   help="optional held-out subjects scored once at the end")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)

    p = sub.add_parser("finetune", help="fine-tune on class labels (k-fold against fixed holdouts)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--init", default="scratch",
                   help="'scratch' or a pretext checkpoint path")
    p.add_argument("--no-reinit-head", action="store_true",
                   help="keep the checkpoint's output layer instead of reinitializing it")
    p.add_argument("--val-size", type=int, required=True, help="validation holdout subjects")
    p.add_argument("--test-size", type=int, required=True, help="test holdout subjects")
    p.add_argument("--k", type=int, default=1, help="training folds (1 = single run)")
    p.add_argument("--balance", choices=["none", "rotate"], default="none",
                   help="rotate: minority-sized majority block per trial")
    p.add_argument("--trial", type=int, default=0, help="rotation trial index for --balance rotate")
    p.add_argument("--subjects-per-class", type=int, default=0,
                   help="subsample the training pool (0 = use all)")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)

    p = sub.add_parser("sweep", help="subjects-per-class sweep over PTR and NPT arms")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ptr-init", required=True, help="pretext checkpoint for the PTR arm")
    p.add_argument("--sizes", required=True, help="comma-separated subjects-per-class values")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--val-size", type=int, required=True)
    p.add_argument("--test-size", type=int, required=True)
    p.add_argument("--dataset-tag", default="synthetic")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--samples-per-tensor", type=int, default=10)
    p.add_argument("--corrupt-op", default=None, help=argparse.SUPPRESS)  # failure-path test hook

    p = sub.add_parser("report", help="aggregate per-run CSVs into summaries and plots")
    p.add_argument("--runs", required=True, nargs="+", help="per-run CSV files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--group-by", default="dataset", choices=["dataset"],
                   help="plot grouping key")
    return parser


# ---------------------------------------------------------------------------
# run manifests


def _flags_dict(args: argparse.Namespace) -> dict:
    flags = {}
    for key, value in sorted(vars(args).items()):
        if key == "command":
            continue
        if isinstance(value, Path):
            value = str(value)
        flags[key] = value
    return flags


def manifest_to_argv(manifest: dict, overrides: dict | None = None) -> list[str]:
    """Rebuild the argv that reproduces a recorded run (outputs included)."""
    flags = dict(manifest["flags"])
    if overrides:
        flags.update(overrides)
    argv = [manifest["command"]]
    for key in sorted(flags):
        value = flags[key]
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            if value:
                argv.append(flag)
        elif value is None:
            continue
        elif isinstance(value, (list, tuple)):
            argv.append(flag)
            argv.extend(str(v) for v in value)
        else:
            argv.extend([flag, str(value)])
    return argv


def _write_manifest(directory: Path, command: str, args: argparse.Namespace,
                    inputs: list[str], outputs: list[str], started: float) -> Path:
    manifest = {
        "command": command,
        "tool_version": timearrow.__version__,
        "flags": _flags_dict(args),
        "seed": getattr(args, "seed", None),
        "inputs": sorted(inputs),
        "outputs": sorted(outputs),
        "duration_s": round(time.time() - started, 3),
    }
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / MANIFEST_FILENAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def _parse_ar(text: str) -> tuple[tuple[float, float], ...]:
    pairs = []
    for chunk in text.split(";"):
        a1, a2 = chunk.split(",")
        pairs.append((float(a1), float(a2)))
    return tuple(pairs)


def cmd_synth(args: argparse.Namespace) -> int:
    started = time.time()
    config = SynthConfig(
        components=args.components,
        timepoints=args.timepoints,
        subjects_per_class=args.subjects_per_class,
        n_classes=args.classes,
        ar_coefficients=_parse_ar(args.ar),
        asymmetry_strength=args.asymmetry,
        noise_scale=args.noise,
        gaussian_only=args.gaussian_only,
        coeff_jitter=args.coeff_jitter,
        seed=args.seed,
    )
    dataset = synth_generate(config)
    out = Path(args.out)
    manifest = save_dataset(dataset, out)
    outputs = [p.name for p in sorted(out.iterdir()) if p.name != MANIFEST_FILENAME]
    _write_manifest(out, "synth", args, inputs=[], outputs=outputs, started=started)
    print(f"synth: {len(dataset)} subjects, {args.classes} classes, "
          f"{args.components}x{args.timepoints} each -> {manifest}")
    return 0


def _train_config_from_args(args: argparse.Namespace, init_from=None, reinit_head=True) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        max_epochs=args.epochs,
        patience=args.patience,
        seed=args.seed,
        init_from=init_from,
        reinit_head=reinit_head,
        normalize=not args.no_normalize,
    )


def _model_config_from_args(args: argparse.Namespace, components: int) -> ModelConfig:
    return ModelConfig(
        components=components,
        window_len=args.window_len,
        conv_channels=tuple(int(c) for c in args.conv_channels.split(",")),
        conv_kernels=tuple(int(k) for k in args.conv_kernels.split(",")),
        encoder_dim=args.encoder_dim,
        lstm_hidden=args.lstm_hidden,
        attention_dim=args.attention_dim,
        head_hidden=args.head_hidden,
    )


def _write_history_csv(path: Path, history: list[training.EpochStats]) -> None:
    lines = ["epoch,train_loss,val_auc"]
    lines += [f"{h.epoch},{h.train_loss!r},{h.val_auc!r}" for h in history]
    path.write_text("\n".join(lines) + "\n")


def cmd_pretrain(args: argparse.Namespace) -> int:
    started = time.time()
    dataset = load_dataset(args.data)
    val_size = args.val_size or max(1, round(0.2 * len(dataset)))
    train_s, val_s, test_s = training.pretext_splits(
        dataset, args.window_len, val_size=val_size, test_size=args.test_size,
        seed=args.seed, normalize=not args.no_normalize)
    logger.info("pretext dataset: %d samples (%d train / %d val / %d test), %d windows per subject",
                len(train_s) + len(val_s) + len(test_s), len(train_s), len(val_s), len(test_s),
                train_s[0].n_windows)
    mconfig = _model_config_from_args(args, dataset.components)
    checkpoint = training.pretrain(train_s, val_s, _train_config_from_args(args), mconfig)

    out = Path(args.out)
    if test_s:
        params = {k: training.ad.parameter(v.copy()) for k, v in checkpoint.tensors.items()}
        probas = training.predict_probas(params, mconfig, test_s)
        labels = np.array([s.label for s in test_s])
        test_auc = metrics.auc(metrics.ScoredSet(scores=probas[:, 1], labels=labels))
        checkpoint.metadata["test_auc"] = repr(float(test_auc))
        logger.info("held-out pretext test AUC: %.4f", test_auc)
    save_checkpoint(checkpoint, out)
    history = training.history_from_metadata(checkpoint.metadata)
    history_path = out.with_suffix(out.suffix + ".history.csv")
    _write_history_csv(history_path, history)
    _write_manifest(out.parent, "pretrain", args, inputs=[str(args.data)],
                    outputs=[out.name, history_path.name], started=started)
    print(f"pretrain: best val AUC {checkpoint.metadata['best_val_auc']} "
          f"at epoch {checkpoint.metadata['epochs_to_best']} -> {out}")
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    started = time.time()
    dataset = load_dataset(args.data)
    if args.balance == "rotate":
        dataset = balance_classes(dataset, seed=args.seed, trial_index=args.trial)
        logger.info("balanced dataset: %d records (trial %d)", len(dataset), args.trial)
    init_from = None if args.init == "scratch" else args.init
    tconfig = _train_config_from_args(args, init_from=init_from,
                                      reinit_head=not args.no_reinit_head)
    mconfig = _model_config_from_args(args, dataset.components)
    spec = SplitSpec(val_size=args.val_size, test_size=args.test_size, seed=args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.k >= 2:
        if args.subjects_per_class:
            raise TrainingError("--subjects-per-class combines with --k 1 only")
        results, checkpoints = training.kfold_run(dataset, args.k, spec, tconfig, mconfig,
                                                  return_checkpoints=True)
    else:
        pool, val, test = training.stratified_split(dataset, spec)
        if args.subjects_per_class:
            pool = subsample_per_class(pool, args.subjects_per_class, args.seed)
        result, ckpt = training.finetune(pool, val, test, tconfig, mconfig)
        results, checkpoints = [result], [ckpt]

    best_index = max(range(len(results)),
                     key=lambda i: (results[i].best_val_auc, -results[i].fold_index))
    ckpt_path = out / "best.ckpt"
    save_checkpoint(checkpoints[best_index], ckpt_path)
    folds_path = out / "folds.csv"
    lines = ["fold,best_val_auc,test_auc,epochs_to_best"]
    lines += [f"{r.fold_index},{r.best_val_auc!r},{r.test_auc!r},{r.epochs_to_best}"
              for r in results]
    folds_path.write_text("\n".join(lines) + "\n")
    _write_manifest(out, "finetune", args, inputs=[str(args.data)],
                    outputs=[ckpt_path.name, folds_path.name], started=started)
    for r in results:
        print(f"fold {r.fold_index}: val AUC {r.best_val_auc:.4f}, test AUC {r.test_auc:.4f}, "
              f"best epoch {r.epochs_to_best}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    started = time.time()
    dataset = load_dataset(args.data)
    sizes = [int(s) for s in args.sizes.split(",")]
    tconfig = _train_config_from_args(args, init_from=None)
    mconfig = _model_config_from_args(args, dataset.components)
    spec = SplitSpec(val_size=args.val_size, test_size=args.test_size, seed=args.seed)
    arms = {"PTR": args.ptr_init, "NPT": None}
    runs = training.sweep_subjects_per_class(
        dataset, sizes, arms, args.repeats, tconfig, mconfig, spec,
        dataset_tag=args.dataset_tag, jobs=args.jobs)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [RunRow(r.dataset, r.arm, r.subjects_per_class, r.repeat, r.test_auc) for r in runs]
    metrics.write_runs_csv(rows, out / "runs.csv")
    detail_lines = ["dataset,arm,subjects_per_class,repeat,test_auc,epochs_to_best,best_val_auc,seed"]
    detail_lines += [f"{r.dataset},{r.arm},{r.subjects_per_class},{r.repeat},{r.test_auc!r},"
                     f"{r.epochs_to_best},{r.best_val_auc!r},{r.seed}" for r in runs]
    (out / "runs_detail.csv").write_text("\n".join(detail_lines) + "\n")

    reports = {}
    for size in sizes:
        for arm in sorted(arms):
            cell = [r.test_auc for r in runs if r.subjects_per_class == size and r.arm == arm]
            reports[(size, arm)] = summarize(cell, dataset=args.dataset_tag, arm=arm,
                                             subjects_per_class=size)
    metrics.write_summary_csv([reports[k] for k in sorted(reports)], out / "summary.csv")
    comparisons = [compare_arms(reports[(size, "PTR")], reports[(size, "NPT")]) for size in sizes]
    metrics.write_comparison_csv(comparisons, out / "comparison.csv")
    _write_manifest(out, "sweep", args, inputs=[str(args.data), str(args.ptr_init)],
                    outputs=["runs.csv", "runs_detail.csv", "summary.csv", "comparison.csv"],
                    started=started)
    for c in comparisons:
        print(f"size {c.subjects_per_class}: PTR median {c.ptr_median:.4f} vs "
              f"NPT median {c.npt_median:.4f} (delta {c.median_delta:+.4f})")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_gradcheck(seed=args.seed, tolerance=args.tolerance,
                            samples_per_tensor=args.samples_per_tensor,
                            corrupt_op=args.corrupt_op)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.op}: max_rel_error={r.max_rel_error:.3e}")
    if failed:
        print(f"gradcheck FAILED for {len(failed)} op(s): {', '.join(r.op for r in failed)}")
        return 1
    print(f"gradcheck passed: {len(results)} ops within {args.tolerance:g}")
    return 0


def _sanitize(tag: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in tag)


def _plot_dataset(dataset_tag: str, rows: list[RunRow], out_dir: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "timearrow"
    sizes = sorted({r.subjects_per_class for r in rows})
    arms = sorted({r.arm for r in rows})
    offsets = np.linspace(-0.18, 0.18, len(arms)) if len(arms) > 1 else [0.0]
    colors = {"PTR": "#1f77b4", "NPT": "#d62728"}

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for arm, offset in zip(arms, offsets):
        stats = []
        positions = []
        for i, size in enumerate(sizes):
            aucs = [r.test_auc for r in rows if r.arm == arm and r.subjects_per_class == size]
            if not aucs:
                continue
            report = summarize(aucs, dataset=dataset_tag, arm=arm, subjects_per_class=size)
            q1, q3 = np.percentile(aucs, [25, 75])
            stats.append({
                "med": report.median_auc,
                "q1": float(q1), "q3": float(q3),
                "whislo": float(min(aucs)), "whishi": float(max(aucs)),
                "label": str(size),
            })
            positions.append(i + offset)
        color = colors.get(arm, "#555555")
        artists = ax.bxp(stats, positions=positions, widths=0.28, showfliers=False,
                         patch_artist=True)
        for box in artists["boxes"]:
            box.set(facecolor="none", edgecolor=color)
        for key in ("whiskers", "caps", "medians"):
            for artist in artists[key]:
                artist.set(color=color)
        ax.plot([], [], color=color, label=arm)
    ax.set_xticks(range(len(sizes)))
    ax.set_xticklabels([str(s) for s in sizes])
    ax.set_xlabel("subjects per class")
    ax.set_ylabel("test AUC")
    ax.set_title(dataset_tag)
    ax.legend()
    ax.grid(True, alpha=0.3)
    path = out_dir / f"{_sanitize(dataset_tag)}.svg"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def cmd_report(args: argparse.Namespace) -> int:
    started = time.time()
    rows: list[RunRow] = []
    for path in args.runs:
        rows.extend(read_runs_csv(path))
    if not rows:
        raise DataValidationError("report: no rows in the given CSV files")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    by_dataset: dict[str, list[RunRow]] = {}
    for r in rows:
        by_dataset.setdefault(r.dataset, []).append(r)
    reports = []
    outputs = []
    for dataset_tag in sorted(by_dataset):
        group = by_dataset[dataset_tag]
        cells = sorted({(r.subjects_per_class, r.arm) for r in group})
        for size, arm in cells:
            aucs = [r.test_auc for r in group if r.subjects_per_class == size and r.arm == arm]
            reports.append(summarize(aucs, dataset=dataset_tag, arm=arm, subjects_per_class=size))
        plot_path = _plot_dataset(dataset_tag, group, out)
        outputs.append(plot_path.name)
        print(f"report: {dataset_tag}: {len(group)} runs -> {plot_path}")
    metrics.write_summary_csv(reports, out / "summary.csv")
    outputs.append("summary.csv")
    _write_manifest(out, "report", args, inputs=[str(p) for p in args.runs],
                    outputs=outputs, started=started)
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _VALIDATION_ERRORS as exc:
        print(f"timearrow {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - unexpected runtime failures
        print(f"timearrow {args.command}: runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
