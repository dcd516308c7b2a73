"""Input validation helpers shared by the estimators and the data pipeline."""

from __future__ import annotations

import numpy as np

from timearrow.data import Dataset, DataValidationError, SubjectRecord

__all__ = ["check_time_courses", "check_binary_labels", "records_from_arrays"]


def check_time_courses(X, min_timepoints: int = 1) -> list[np.ndarray]:
    """Validate a sequence of ``(components, timepoints)`` matrices.

    Every matrix must be 2-D, finite, share the component count, and have at
    least ``min_timepoints`` columns. Returns float32 copies.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    matrices: list[np.ndarray] = []
    components = None
    for i, x in enumerate(X):
        arr = np.asarray(x, dtype=np.float32)
        if arr.ndim != 2:
            raise DataValidationError(f"X[{i}] must be 2-D (components x timepoints), got ndim={arr.ndim}")
        if not np.all(np.isfinite(arr)):
            raise DataValidationError(f"X[{i}] contains non-finite values")
        if components is None:
            components = arr.shape[0]
        elif arr.shape[0] != components:
            raise DataValidationError(
                f"X[{i}] has {arr.shape[0]} components, expected {components}")
        if arr.shape[1] < min_timepoints:
            raise DataValidationError(
                f"X[{i}] has {arr.shape[1]} timepoints, need at least {min_timepoints}")
        matrices.append(arr)
    if not matrices:
        raise DataValidationError("X is empty")
    return matrices


def check_binary_labels(y, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (indicator labels in {0,1}, sorted original class values)."""
    labels = np.asarray(y)
    if labels.ndim != 1 or len(labels) != n_samples:
        raise DataValidationError(
            f"y must be 1-D with {n_samples} entries, got shape {labels.shape}")
    classes = np.unique(labels)
    if len(classes) != 2:
        raise DataValidationError(f"expected exactly 2 classes, got {len(classes)}: {classes}")
    return (labels == classes[1]).astype(np.int64), classes


def records_from_arrays(matrices: list[np.ndarray], labels: np.ndarray | None = None,
                        class_names: list[str] | None = None, provenance: str = "in-memory") -> Dataset:
    """Wrap validated matrices (and optional labels) as a Dataset."""
    if labels is None:
        labels = np.zeros(len(matrices), dtype=np.int64)
        class_names = class_names or ["all"]
    records = [
        SubjectRecord(subject_id=f"x{i:05d}", label=int(label), matrix=m)
        for i, (m, label) in enumerate(zip(matrices, labels))
    ]
    if class_names is None:
        class_names = [f"class{i}" for i in range(int(labels.max()) + 1)]
    return Dataset(records=records, class_names=list(class_names), provenance=provenance)
