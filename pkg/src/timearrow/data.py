"""Datasets of multichannel time courses: loading, windowing, time reversal,
pretext construction, synthetic generation, and split/balance utilities.

A subject is one ``components x timepoints`` float32 matrix with a class
label. The self-supervised pretext task doubles a dataset: each subject
contributes its windowed forward sequence (direction 0) and the windowed
reversal of the full matrix (direction 1). Reversal happens before
windowing, so window order reverses too.

All randomized operations are pure functions of their inputs and a seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "DataValidationError",
    "SubjectRecord",
    "Dataset",
    "WindowedSample",
    "PretextSample",
    "SynthConfig",
    "SplitSpec",
    "load_dataset",
    "save_dataset",
    "slice_windows",
    "reverse_time",
    "make_pretext_dataset",
    "zscore_normalize",
    "normalize_dataset",
    "synth_generate",
    "stratified_split",
    "balance_classes",
    "subsample_per_class",
]

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
CLASSES_NAME = "classes.txt"
MANIFEST_HEADER = "subject_id\tlabel\tpath"

BURN_IN = 50


class DataValidationError(ValueError):
    """A dataset file or record violates the format contract."""


@dataclass
class SubjectRecord:
    """One subject: a components x timepoints matrix and a class label."""

    subject_id: str
    label: int
    matrix: np.ndarray

    @property
    def components(self) -> int:
        return self.matrix.shape[0]

    @property
    def timepoints(self) -> int:
        return self.matrix.shape[1]


@dataclass
class Dataset:
    """A list of subject records sharing a component count."""

    records: list[SubjectRecord]
    class_names: list[str]
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def components(self) -> int:
        return self.records[0].components

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for r in self.records:
            counts[r.label] = counts.get(r.label, 0) + 1
        return counts

    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self.records]


@dataclass
class WindowedSample:
    """Contiguous non-overlapping windows of one subject, in temporal order.

    ``windows`` has dims ``(T_w, components, window_len)``.
    """

    windows: np.ndarray
    subject_id: str
    label: int

    @property
    def n_windows(self) -> int:
        return self.windows.shape[0]


@dataclass
class PretextSample:
    """A windowed sequence labeled by its time direction (0 forward, 1 reversed)."""

    sample: WindowedSample
    direction: int


@dataclass(frozen=True)
class SplitSpec:
    """Fixed-size validation/test holdouts; the remainder is the train pool."""

    val_size: int
    test_size: int
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if self.val_size < 0 or self.test_size < 0:
            raise DataValidationError(
                f"split sizes must be nonnegative, got val={self.val_size} test={self.test_size}")


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic multichannel AR(2) family with a tunable time-direction signal.

    Per subject and component the generator iterates

        x_t = a1 * x_{t-1} + a2 * tanh(x_{t-2})
              + asymmetry_strength * (e_t - 1) + noise_scale * n_t

    with ``e_t ~ Exp(1)`` (centered, skewed) and ``n_t ~ N(0, 1)``. Skewed
    innovations and the nonlinear lag both break time-reversal symmetry, so
    ``asymmetry_strength`` acts as a single dial for how learnable the
    direction pretext is. With ``gaussian_only=True`` the recurrence becomes
    the linear ``a1 * x_{t-1} + a2 * x_{t-2} + noise_scale * n_t`` with no
    skewed term: a stationary linear Gaussian AR(2), which is
    time-reversible and carries no direction signal.

    Class identity selects the ``(a1, a2)`` pair; each subject additionally
    jitters its pair by ``U(-coeff_jitter, +coeff_jitter)`` so classes
    overlap instead of being point masses. A sparse cross-component mixing
    (shared by all subjects, so it carries no class or direction
    information) is applied after generation. The first ``BURN_IN`` steps
    are discarded.
    """

    components: int = 53
    timepoints: int = 140
    subjects_per_class: int = 100
    n_classes: int = 2
    ar_coefficients: tuple[tuple[float, float], ...] = ((0.55, 0.25), (0.25, 0.5))
    asymmetry_strength: float = 1.5
    noise_scale: float = 1.0
    gaussian_only: bool = False
    coeff_jitter: float = 0.08
    mixing_neighbors: int = 2
    mixing_weight: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.components < 1 or self.timepoints < 1 or self.subjects_per_class < 1:
            raise DataValidationError(f"invalid synth dims in {self}")
        if self.n_classes < 1:
            raise DataValidationError("need at least one class")
        if len(self.ar_coefficients) < self.n_classes:
            raise DataValidationError(
                f"need {self.n_classes} ar_coefficients pairs, got {len(self.ar_coefficients)}")
        if self.asymmetry_strength < 0:
            raise DataValidationError("asymmetry_strength must be >= 0")
        if self.noise_scale <= 0:
            raise DataValidationError("noise_scale must be > 0")
        if self.coeff_jitter < 0:
            raise DataValidationError("coeff_jitter must be >= 0")
        for a1, a2 in self.ar_coefficients[: self.n_classes]:
            if abs(a1) + abs(a2) + 2 * self.coeff_jitter >= 1.0:
                raise DataValidationError(
                    f"unstable AR coefficients ({a1}, {a2}) with jitter {self.coeff_jitter}: "
                    "|a1| + |a2| (+ jitter margin) must stay below 1")


# ---------------------------------------------------------------------------
# core record transforms


def reverse_time(record: SubjectRecord) -> SubjectRecord:
    """Reverse every component's time series; an exact involution."""
    return SubjectRecord(
        subject_id=record.subject_id + "-rev",
        label=record.label,
        matrix=np.ascontiguousarray(record.matrix[:, ::-1]),
    )


def zscore_normalize(record: SubjectRecord) -> SubjectRecord:
    """Per component: subtract the mean and divide by the std over time.

    Components with zero variance get std clamped to 1 (yielding zeros).
    Statistics are computed in float64 and the result stored as float32.
    """
    m = record.matrix.astype(np.float64)
    mean = m.mean(axis=1, keepdims=True)
    std = m.std(axis=1, keepdims=True)
    std[std == 0.0] = 1.0
    return SubjectRecord(
        subject_id=record.subject_id,
        label=record.label,
        matrix=((m - mean) / std).astype(np.float32),
    )


def normalize_dataset(dataset: Dataset) -> Dataset:
    return Dataset(
        records=[zscore_normalize(r) for r in dataset.records],
        class_names=list(dataset.class_names),
        provenance=dataset.provenance,
    )


def slice_windows(record: SubjectRecord, window_len: int) -> WindowedSample:
    """Cut ``floor(timepoints / window_len)`` contiguous windows from t=0.

    Trailing remainder timepoints are dropped (with a logged warning).
    """
    if window_len < 1:
        raise DataValidationError(f"window_len must be >= 1, got {window_len}")
    n_time = record.timepoints
    if n_time < window_len:
        raise DataValidationError(
            f"subject {record.subject_id}: {n_time} timepoints < window_len {window_len}")
    n_windows = n_time // window_len
    remainder = n_time - n_windows * window_len
    if remainder:
        logger.warning("subject %s: dropping %d trailing timepoints (window_len=%d)",
                       record.subject_id, remainder, window_len)
    used = record.matrix[:, : n_windows * window_len]
    windows = np.ascontiguousarray(
        used.reshape(record.components, n_windows, window_len).transpose(1, 0, 2))
    return WindowedSample(windows=windows, subject_id=record.subject_id, label=record.label)


def make_pretext_dataset(dataset: Dataset, window_len: int) -> list[PretextSample]:
    """Forward and reversed windowed twins for every subject.

    Reversal applies to the full matrix before windowing, so the reversed
    twin's window order is reversed as well. Output has exactly two samples
    per subject, one per direction.
    """
    samples: list[PretextSample] = []
    for record in dataset.records:
        samples.append(PretextSample(slice_windows(record, window_len), direction=0))
        samples.append(PretextSample(slice_windows(reverse_time(record), window_len), direction=1))
    return samples


# ---------------------------------------------------------------------------
# synthetic generation


def _mixing_matrix(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    m = np.eye(config.components, dtype=np.float64)
    if config.mixing_neighbors < 1 or config.mixing_weight == 0.0 or config.components < 2:
        return m
    k = min(config.mixing_neighbors, config.components - 1)
    for i in range(config.components):
        others = np.delete(np.arange(config.components), i)
        picks = rng.choice(others, size=k, replace=False)
        m[i, picks] += config.mixing_weight
    return m


def _synth_subject(config: SynthConfig, coeffs: tuple[float, float],
                   rng: np.random.Generator, mixing: np.ndarray) -> np.ndarray:
    c, total = config.components, config.timepoints + BURN_IN
    jitter = rng.uniform(-config.coeff_jitter, config.coeff_jitter, size=2)
    a1 = coeffs[0] + jitter[0]
    a2 = coeffs[1] + jitter[1]
    normals = rng.standard_normal((c, total))
    x = np.zeros((c, total), dtype=np.float64)
    x[:, 0] = config.noise_scale * normals[:, 0]
    x[:, 1] = a1 * x[:, 0] + config.noise_scale * normals[:, 1]
    if config.gaussian_only:
        for t in range(2, total):
            x[:, t] = (a1 * x[:, t - 1] + a2 * x[:, t - 2]
                       + config.noise_scale * normals[:, t])
    else:
        skewed = rng.exponential(1.0, size=(c, total)) - 1.0
        for t in range(2, total):
            x[:, t] = (a1 * x[:, t - 1] + a2 * np.tanh(x[:, t - 2])
                       + config.asymmetry_strength * skewed[:, t]
                       + config.noise_scale * normals[:, t])
    mixed = mixing @ x[:, BURN_IN:]
    return mixed.astype(np.float32)


def synth_generate(config: SynthConfig) -> Dataset:
    """Deterministic synthetic dataset with the configured class dynamics."""
    mixing = _mixing_matrix(config, np.random.default_rng(np.random.SeedSequence([config.seed, 7777])))
    records = []
    for class_index in range(config.n_classes):
        coeffs = config.ar_coefficients[class_index]
        for subject_index in range(config.subjects_per_class):
            rng = np.random.default_rng(
                np.random.SeedSequence([config.seed, class_index, subject_index]))
            matrix = _synth_subject(config, coeffs, rng, mixing)
            records.append(SubjectRecord(
                subject_id=f"c{class_index}-s{subject_index:04d}",
                label=class_index,
                matrix=matrix,
            ))
    class_names = [f"class{i}" for i in range(config.n_classes)]
    kind = "linear-gaussian" if config.gaussian_only else "skewed-nonlinear"
    provenance = (f"synthetic {kind} ar2 seed={config.seed} "
                  f"asymmetry={config.asymmetry_strength} noise={config.noise_scale}")
    return Dataset(records=records, class_names=class_names, provenance=provenance)


# ---------------------------------------------------------------------------
# splits and balancing


def _allocate_per_class(class_sizes: dict[int, int], total: int) -> dict[int, int]:
    """Largest-remainder allocation of ``total`` across classes."""
    n = sum(class_sizes.values())
    quotas = {c: size * total / n for c, size in class_sizes.items()}
    alloc = {c: int(math.floor(q)) for c, q in quotas.items()}
    leftover = total - sum(alloc.values())
    by_remainder = sorted(class_sizes, key=lambda c: (-(quotas[c] - alloc[c]), c))
    for c in by_remainder[:leftover]:
        alloc[c] += 1
    return alloc


def stratified_split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint (train, val, test) with class proportions preserved.

    val/test allocations use largest-remainder rounding of the full-dataset
    class proportions; the remainder is train. Deterministic given the seed.
    """
    n = len(dataset)
    if spec.val_size + spec.test_size >= n:
        raise DataValidationError(
            f"holdouts (val={spec.val_size} + test={spec.test_size}) must be smaller "
            f"than the dataset ({n} records)")
    rng = np.random.default_rng(spec.seed)
    val_idx: set[int] = set()
    test_idx: set[int] = set()
    if spec.stratified:
        by_class: dict[int, list[int]] = {}
        for i, r in enumerate(dataset.records):
            by_class.setdefault(r.label, []).append(i)
        class_sizes = {c: len(ix) for c, ix in by_class.items()}
        val_alloc = _allocate_per_class(class_sizes, spec.val_size)
        test_alloc = _allocate_per_class(class_sizes, spec.test_size)
        for c in sorted(by_class):
            want = val_alloc[c] + test_alloc[c]
            if want > class_sizes[c]:
                raise DataValidationError(
                    f"class {c} has {class_sizes[c]} records; cannot hold out {want}")
            order = rng.permutation(by_class[c])
            val_idx.update(order[: val_alloc[c]])
            test_idx.update(order[val_alloc[c]: want])
    else:
        order = rng.permutation(n)
        val_idx.update(order[: spec.val_size])
        test_idx.update(order[spec.val_size: spec.val_size + spec.test_size])

    def pick(indices: set[int]) -> Dataset:
        return Dataset(
            records=[dataset.records[i] for i in range(n) if i in indices],
            class_names=list(dataset.class_names),
            provenance=dataset.provenance,
        )

    train_idx = set(range(n)) - val_idx - test_idx
    return pick(train_idx), pick(val_idx), pick(test_idx)


def balance_classes(dataset: Dataset, seed: int, trial_index: int = 0) -> Dataset:
    """Keep the whole minority class plus a rotating same-size majority block.

    The majority class is shuffled once (by ``seed``); trial ``t`` takes the
    block starting at offset ``t * minority_size`` (wrapping), so
    consecutive trials cover every majority subject.
    """
    counts = dataset.class_counts()
    if len(counts) != 2:
        raise DataValidationError(f"balance_classes needs exactly two classes, got {sorted(counts)}")
    (c_a, n_a), (c_b, n_b) = sorted(counts.items())
    minority, majority = (c_a, c_b) if n_a <= n_b else (c_b, c_a)
    minority_size = counts[minority]
    majority_indices = [i for i, r in enumerate(dataset.records) if r.label == majority]
    shuffled = list(np.random.default_rng(seed).permutation(majority_indices))
    start = (trial_index * minority_size) % len(shuffled)
    picked = {shuffled[(start + j) % len(shuffled)] for j in range(minority_size)}
    keep = picked | {i for i, r in enumerate(dataset.records) if r.label == minority}
    return Dataset(
        records=[dataset.records[i] for i in range(len(dataset.records)) if i in keep],
        class_names=list(dataset.class_names),
        provenance=dataset.provenance,
    )


def subsample_per_class(dataset: Dataset, n_per_class: int, seed: int) -> Dataset:
    """Exactly ``n_per_class`` records per class, uniform without replacement.

    Same (dataset, seed) gives nested subsets across sizes: the size-n
    subset is the first n entries of a per-class seeded permutation.
    """
    if n_per_class < 1:
        raise DataValidationError(f"n_per_class must be >= 1, got {n_per_class}")
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(dataset.records):
        by_class.setdefault(r.label, []).append(i)
    rng = np.random.default_rng(seed)
    keep: set[int] = set()
    for c in sorted(by_class):
        pool = by_class[c]
        if len(pool) < n_per_class:
            raise DataValidationError(
                f"class {c} has only {len(pool)} records; cannot subsample {n_per_class}")
        order = rng.permutation(pool)
        keep.update(order[:n_per_class])
    return Dataset(
        records=[dataset.records[i] for i in range(len(dataset.records)) if i in keep],
        class_names=list(dataset.class_names),
        provenance=dataset.provenance,
    )


# ---------------------------------------------------------------------------
# on-disk format: manifest.tsv + classes.txt + one CSV matrix per subject


def _format_float(v: np.float32) -> str:
    # shortest decimal that round-trips the float32 value
    return np.format_float_positional(v, unique=True)


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write the dataset in the manifest/CSV layout that ``load_dataset`` reads.

    Returns the manifest path. Writing the same dataset twice produces
    byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for record in dataset.records:
        rel = f"{record.subject_id}.csv"
        rows = []
        for row in record.matrix:
            rows.append(",".join(_format_float(v) for v in row))
        (out / rel).write_text("\n".join(rows) + "\n")
        lines.append(f"{record.subject_id}\t{record.label}\t{rel}")
    (out / CLASSES_NAME).write_text("\n".join(dataset.class_names) + "\n")
    manifest = out / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def _load_matrix(path: Path, subject_id: str) -> np.ndarray:
    if not path.exists():
        raise DataValidationError(f"subject {subject_id}: matrix file missing: {path}")
    rows: list[np.ndarray] = []
    width = None
    with open(path) as fh:
        for row_index, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            try:
                row = np.asarray(cells, dtype=np.float64)
            except ValueError:
                raise DataValidationError(
                    f"subject {subject_id}: non-numeric cell in row {row_index} of {path.name}")
            if width is None:
                width = row.size
            elif row.size != width:
                raise DataValidationError(
                    f"subject {subject_id}: ragged row {row_index} in {path.name} "
                    f"({row.size} cells, expected {width})")
            if not np.all(np.isfinite(row)):
                raise DataValidationError(
                    f"subject {subject_id}: non-finite value in row {row_index} of {path.name}")
            rows.append(row.astype(np.float32))
    if not rows:
        raise DataValidationError(f"subject {subject_id}: empty matrix file {path.name}")
    return np.vstack(rows)


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load a dataset from its manifest; validates shapes and finiteness."""
    manifest = Path(manifest_path)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_NAME
    if not manifest.exists():
        raise DataValidationError(f"manifest not found: {manifest}")
    base = manifest.parent
    text = manifest.read_text().splitlines()
    if not text or text[0] != MANIFEST_HEADER:
        raise DataValidationError(
            f"manifest {manifest} must start with header '{MANIFEST_HEADER}'")

    classes_path = base / CLASSES_NAME
    if not classes_path.exists():
        raise DataValidationError(f"missing {CLASSES_NAME} next to {manifest}")
    class_names = [line for line in classes_path.read_text().splitlines() if line.strip()]

    records = []
    seen: set[str] = set()
    components = None
    for line_no, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataValidationError(f"manifest line {line_no}: expected 3 tab-separated fields")
        subject_id, label_text, rel = parts
        if subject_id in seen:
            raise DataValidationError(f"duplicate subject_id {subject_id!r} in manifest")
        seen.add(subject_id)
        try:
            label = int(label_text)
        except ValueError:
            raise DataValidationError(f"subject {subject_id}: label {label_text!r} is not an integer")
        if label < 0 or label >= len(class_names):
            raise DataValidationError(
                f"subject {subject_id}: label {label} outside classes 0..{len(class_names) - 1}")
        matrix = _load_matrix(base / rel, subject_id)
        if components is None:
            components = matrix.shape[0]
        elif matrix.shape[0] != components:
            raise DataValidationError(
                f"subject {subject_id}: {matrix.shape[0]} components, expected {components}")
        records.append(SubjectRecord(subject_id=subject_id, label=label, matrix=matrix))
    if not records:
        raise DataValidationError(f"manifest {manifest} lists no subjects")
    return Dataset(records=records, class_names=class_names, provenance=str(manifest))
