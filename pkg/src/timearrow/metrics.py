"""ROC/AUC computation and experiment-report aggregation.

The primary AUC implementation is the Mann-Whitney rank statistic with
average ranks for ties; :func:`auc_bruteforce_oracle` is the O(n^2)
pairwise cross-check used by tests, and the trapezoidal area under
:func:`roc_curve` is a third route. Single-class score sets always raise
instead of returning a default, so experiment bugs surface loudly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ScoredSet",
    "RocPoint",
    "EvalReport",
    "ComparisonRow",
    "RunRow",
    "roc_curve",
    "auc",
    "auc_bruteforce_oracle",
    "roc_auc_trapezoid",
    "summarize",
    "compare_arms",
    "write_runs_csv",
    "read_runs_csv",
    "write_summary_csv",
    "write_comparison_csv",
    "RUNS_HEADER",
    "SUMMARY_HEADER",
]

RUNS_HEADER = ["dataset", "arm", "subjects_per_class", "repeat", "test_auc"]
SUMMARY_HEADER = ["dataset", "arm", "subjects_per_class", "mean_auc", "median_auc", "n_runs"]
COMPARISON_HEADER = ["dataset", "subjects_per_class", "ptr_mean", "ptr_median",
                     "npt_mean", "npt_median", "median_delta", "n_pairs"]


@dataclass
class ScoredSet:
    """Per-subject positive-class scores with binary ground-truth labels."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError(
                f"scores and labels must be equal-length 1-D, got {self.scores.shape} "
                f"vs {self.labels.shape}")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise ValueError("labels must be 0 or 1")

    def require_both_classes(self) -> None:
        n_pos = int(self.labels.sum())
        if n_pos == 0 or n_pos == len(self.labels):
            raise ValueError(
                f"AUC undefined: need both classes, got {n_pos} positives of {len(self.labels)}")


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float
    fpr: float


def roc_curve(scored: ScoredSet) -> list[RocPoint]:
    """ROC points at every distinct score (descending) plus (0,0)/(1,1) sentinels.

    A score counts as predicted-positive when it is >= the threshold.
    """
    scored.require_both_classes()
    scores, labels = scored.scores, scored.labels
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    points = [RocPoint(threshold=float("inf"), tpr=0.0, fpr=0.0)]
    order = np.argsort(-scores, kind="stable")
    tp = fp = 0
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and scores[order[j]] == scores[order[i]]:
            lab = labels[order[j]]
            tp += int(lab)
            fp += int(1 - lab)
            j += 1
        points.append(RocPoint(threshold=float(scores[order[i]]),
                               tpr=tp / n_pos, fpr=fp / n_neg))
        i = j
    points.append(RocPoint(threshold=float("-inf"), tpr=1.0, fpr=1.0))
    return points


def roc_auc_trapezoid(scored: ScoredSet) -> float:
    """Trapezoidal area under the ROC curve (cross-check for :func:`auc`)."""
    points = roc_curve(scored)
    fpr = np.array([p.fpr for p in points])
    tpr = np.array([p.tpr for p in points])
    return float(np.trapezoid(tpr, fpr))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties receiving the mean of their rank range."""
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    starts = np.concatenate(([0], np.cumsum(counts)))[:-1]
    avg = starts + (counts + 1) / 2.0
    return avg[inverse]


def auc(scored: ScoredSet) -> float:
    """Mann-Whitney AUC: P(random positive outranks random negative), ties at 0.5."""
    scored.require_both_classes()
    ranks = _average_ranks(scored.scores)
    n_pos = int(scored.labels.sum())
    n_neg = len(scored.labels) - n_pos
    rank_sum = float(ranks[scored.labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_bruteforce_oracle(scored: ScoredSet) -> float:
    """Mean over all positive-negative pairs of 1/0.5/0; test oracle, O(n^2)."""
    scored.require_both_classes()
    pos = scored.scores[scored.labels == 1][:, None]
    neg = scored.scores[scored.labels == 0][None, :]
    wins = (pos > neg).astype(np.float64) + 0.5 * (pos == neg)
    return float(wins.mean())


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class EvalReport:
    """Per-run AUCs for one (dataset, arm, subjects_per_class) cell."""

    dataset: str
    arm: str
    subjects_per_class: int
    aucs: list[float]
    run_ids: list[str] = field(default_factory=list)
    mean_auc: float = 0.0
    median_auc: float = 0.0


def summarize(aucs: Sequence[float], *, dataset: str, arm: str,
              subjects_per_class: int, run_ids: Sequence[str] | None = None) -> EvalReport:
    """Arithmetic mean and midpoint median of per-run AUCs."""
    if len(aucs) == 0:
        raise ValueError("summarize: empty AUC list")
    values = [float(a) for a in aucs]
    return EvalReport(
        dataset=dataset,
        arm=arm,
        subjects_per_class=int(subjects_per_class),
        aucs=values,
        run_ids=list(run_ids) if run_ids is not None else [str(i) for i in range(len(values))],
        mean_auc=float(np.mean(values)),
        median_auc=float(np.median(values)),
    )


@dataclass
class ComparisonRow:
    """Pretrained-vs-scratch comparison at one sweep size."""

    dataset: str
    subjects_per_class: int
    ptr_mean: float
    ptr_median: float
    npt_mean: float
    npt_median: float
    median_delta: float
    paired_deltas: list[float]


def compare_arms(ptr: EvalReport, npt: EvalReport) -> ComparisonRow:
    """Delta of medians plus per-repeat paired deltas (by repeat index)."""
    if ptr.dataset != npt.dataset or ptr.subjects_per_class != npt.subjects_per_class:
        raise ValueError(
            f"compare_arms: mismatched cells ({ptr.dataset}, {ptr.subjects_per_class}) vs "
            f"({npt.dataset}, {npt.subjects_per_class})")
    n = min(len(ptr.aucs), len(npt.aucs))
    return ComparisonRow(
        dataset=ptr.dataset,
        subjects_per_class=ptr.subjects_per_class,
        ptr_mean=ptr.mean_auc,
        ptr_median=ptr.median_auc,
        npt_mean=npt.mean_auc,
        npt_median=npt.median_auc,
        median_delta=ptr.median_auc - npt.median_auc,
        paired_deltas=[ptr.aucs[i] - npt.aucs[i] for i in range(n)],
    )


# ---------------------------------------------------------------------------
# CSV emission


@dataclass(frozen=True)
class RunRow:
    dataset: str
    arm: str
    subjects_per_class: int
    repeat: int
    test_auc: float


def write_runs_csv(rows: Iterable[RunRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RUNS_HEADER)
        for r in rows:
            writer.writerow([r.dataset, r.arm, r.subjects_per_class, r.repeat, repr(r.test_auc)])


def read_runs_csv(path: str | Path) -> list[RunRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RUNS_HEADER:
            raise ValueError(f"{path}: expected header {','.join(RUNS_HEADER)}")
        rows = []
        for line in reader:
            if not line:
                continue
            dataset, arm, size, repeat, value = line
            rows.append(RunRow(dataset, arm, int(size), int(repeat), float(value)))
    return rows


def write_summary_csv(reports: Iterable[EvalReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        for r in reports:
            writer.writerow([r.dataset, r.arm, r.subjects_per_class,
                             repr(r.mean_auc), repr(r.median_auc), len(r.aucs)])


def write_comparison_csv(rows: Iterable[ComparisonRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COMPARISON_HEADER)
        for r in rows:
            writer.writerow([r.dataset, r.subjects_per_class,
                             repr(r.ptr_mean), repr(r.ptr_median),
                             repr(r.npt_mean), repr(r.npt_median),
                             repr(r.median_delta), len(r.paired_deltas)])
