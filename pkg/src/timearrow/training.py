"""Two-phase training: self-supervised pretraining on time direction, then
fine-tuning on class labels, with early stopping on validation AUC.

One training run is a single logical thread of parameter updates: per
sample, a fresh tape records the forward pass, gradients accumulate in
fixed sample order, and one Adam step applies per batch. Everything is a
pure function of (data, configs, seed); BLAS pools are pinned to one
thread inside loops so results are bit-reproducible across runs.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from timearrow import autodiff as ad
from timearrow import network
from timearrow.checkpoint import Checkpoint, CheckpointError, load_checkpoint
from timearrow.data import (
    Dataset,
    PretextSample,
    SplitSpec,
    WindowedSample,
    make_pretext_dataset,
    normalize_dataset,
    slice_windows,
    stratified_split,
    subsample_per_class,
)
from timearrow.metrics import ScoredSet, auc
from timearrow.network import ModelConfig

__all__ = [
    "TrainConfig",
    "TrainingError",
    "AdamState",
    "EpochStats",
    "FoldResult",
    "SweepRun",
    "adam_step",
    "init_adam",
    "derive_seed",
    "history_from_metadata",
    "predict_probas",
    "pretext_to_samples",
    "windowed_samples",
    "pretext_splits",
    "pretrain",
    "finetune",
    "kfold_run",
    "sweep_subjects_per_class",
]

logger = logging.getLogger(__name__)

# namespaces for seed derivation, so streams never collide
_SEED_INIT = 101
_SEED_SHUFFLE = 102
_SEED_HEAD = 103
_SEED_FOLD = 104
_SEED_SUBSAMPLE = 105


class TrainingError(ValueError):
    """Training preconditions violated (empty split, missing gradient, ...)."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters shared by both phases."""

    learning_rate: float = 2e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    init_from: str | Path | None = None  # None means train from scratch
    reinit_head: bool = True
    normalize: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainingError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise TrainingError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0 <= self.patience <= self.max_epochs:
            raise TrainingError(
                f"patience must be in [0, max_epochs={self.max_epochs}], got {self.patience}")


def derive_seed(base: int, *keys: int) -> int:
    """Stable child seed from a base seed and integer keys."""
    seq = np.random.SeedSequence([int(base)] + [int(k) for k in keys])
    return int(seq.generate_state(1, dtype=np.uint64)[0] % (2 ** 63))


@dataclass
class AdamState:
    """First/second moment buffers mirroring the parameter map."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam(params: dict[str, ad.Tensor]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
    )


def adam_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> None:
    """Bias-corrected Adam update, applied in sorted parameter-name order."""
    state.step += 1
    t = state.step
    b1, b2 = config.adam_beta1, config.adam_beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            raise TrainingError(f"adam_step: missing gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        params[name].data -= (config.learning_rate * m_hat
                              / (np.sqrt(v_hat) + config.adam_eps)).astype(np.float32)


# ---------------------------------------------------------------------------
# sample preparation


def windowed_samples(dataset: Dataset, window_len: int, normalize: bool = True) -> list[WindowedSample]:
    ds = normalize_dataset(dataset) if normalize else dataset
    return [slice_windows(r, window_len) for r in ds.records]


def pretext_to_samples(pretext: list[PretextSample]) -> list[WindowedSample]:
    """Windowed samples whose label is the time direction."""
    return [WindowedSample(windows=p.sample.windows, subject_id=p.sample.subject_id,
                           label=p.direction) for p in pretext]


def pretext_splits(dataset: Dataset, window_len: int, val_size: int, test_size: int,
                   seed: int, normalize: bool = True,
                   ) -> tuple[list[WindowedSample], list[WindowedSample], list[WindowedSample]]:
    """Subject-level split, then pretext construction per split.

    Splitting subjects first keeps each subject's forward/reversed twins in
    the same partition, so no twin leaks across train/val/test.
    """
    ds = normalize_dataset(dataset) if normalize else dataset
    train, val, test = stratified_split(ds, SplitSpec(val_size=val_size, test_size=test_size,
                                                      seed=seed, stratified=True))
    return (pretext_to_samples(make_pretext_dataset(train, window_len)),
            pretext_to_samples(make_pretext_dataset(val, window_len)),
            pretext_to_samples(make_pretext_dataset(test, window_len)) if len(test) else [])


# ---------------------------------------------------------------------------
# core loop


def predict_probas(params: dict[str, ad.Tensor], config: ModelConfig,
                   samples: list[WindowedSample]) -> np.ndarray:
    """Forward pass without taping; rows are class probability vectors."""
    out = np.empty((len(samples), config.n_classes), dtype=np.float64)
    with threadpool_limits(limits=1):
        for i, sample in enumerate(samples):
            out[i] = network.model_forward(sample.windows, params, config).data
    return out


def _val_auc(params: dict[str, ad.Tensor], config: ModelConfig,
             samples: list[WindowedSample]) -> float:
    probas = predict_probas(params, config, samples)
    labels = np.array([s.label for s in samples])
    return auc(ScoredSet(scores=probas[:, 1], labels=labels))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_auc: float


@dataclass
class FoldResult:
    """Outcome of one training run against fixed holdouts."""

    fold_index: int
    best_val_auc: float
    test_auc: float
    epochs_to_best: int
    history: list[EpochStats] = field(default_factory=list)


def _check_samples(samples: list[WindowedSample], config: ModelConfig, what: str) -> None:
    if not samples:
        raise TrainingError(f"{what} sample set is empty")
    expected = (config.components, config.window_len)
    for s in samples:
        if s.windows.shape[1:] != expected:
            raise TrainingError(
                f"{what} sample {s.subject_id}: window dims {s.windows.shape[1:]} != {expected}")
        if not 0 <= s.label < config.n_classes:
            raise TrainingError(f"{what} sample {s.subject_id}: label {s.label} out of range")


def _fit_loop(train: list[WindowedSample], val: list[WindowedSample],
              params: dict[str, ad.Tensor], tconfig: TrainConfig, mconfig: ModelConfig,
              ) -> tuple[dict[str, np.ndarray], list[EpochStats], int, float]:
    """Train with per-epoch validation AUC; keep the best-epoch parameters."""
    _check_samples(train, mconfig, "train")
    _check_samples(val, mconfig, "validation")
    state = init_adam(params)
    rng = np.random.default_rng(derive_seed(tconfig.seed, _SEED_SHUFFLE))
    order = np.arange(len(train))

    best_tensors = {k: t.data.copy() for k, t in params.items()}
    best_val = -np.inf
    best_epoch = 0
    since_best = 0
    history: list[EpochStats] = []

    with threadpool_limits(limits=1):
        for epoch in range(1, tconfig.max_epochs + 1):
            rng.shuffle(order)
            loss_sum = 0.0
            for start in range(0, len(order), tconfig.batch_size):
                batch = order[start: start + tconfig.batch_size]
                ad.zero_grad(params)
                inv = 1.0 / len(batch)
                for idx in batch:
                    sample = train[idx]
                    with ad.ComputationTape() as tape:
                        probs = network.model_forward(sample.windows, params, mconfig)
                        ce = ad.cross_entropy(probs, sample.label)
                        loss = ad.scale(ce, inv)
                    ad.backward(loss, tape)
                    loss_sum += float(ce.data)
                adam_step(params, {k: t.grad for k, t in params.items()}, state, tconfig)
            val_auc = _val_auc(params, mconfig, val)
            history.append(EpochStats(epoch=epoch, train_loss=loss_sum / len(order), val_auc=val_auc))
            logger.debug("epoch %d: train_loss=%.4f val_auc=%.4f", epoch, history[-1].train_loss, val_auc)
            if val_auc > best_val:
                best_val = val_auc
                best_epoch = epoch
                since_best = 0
                best_tensors = {k: t.data.copy() for k, t in params.items()}
            else:
                since_best += 1
                if since_best >= tconfig.patience:
                    break
    return best_tensors, history, best_epoch, float(best_val)


def _metadata(phase: str, tconfig: TrainConfig, history: list[EpochStats],
              best_epoch: int, best_val: float) -> dict[str, str]:
    return {
        "phase": phase,
        "seed": str(tconfig.seed),
        "epochs_run": str(len(history)),
        "epochs_to_best": str(best_epoch),
        "best_val_auc": repr(best_val),
        "history": ";".join(f"{h.epoch}:{h.train_loss!r}:{h.val_auc!r}" for h in history),
    }


def history_from_metadata(metadata: dict[str, str]) -> list[EpochStats]:
    """Per-epoch stats back out of checkpoint metadata."""
    text = metadata.get("history", "")
    stats = []
    for chunk in text.split(";"):
        if not chunk:
            continue
        epoch, loss, val_auc = chunk.split(":")
        stats.append(EpochStats(epoch=int(epoch), train_loss=float(loss), val_auc=float(val_auc)))
    return stats


def pretrain(pretext_samples: list[PretextSample] | list[WindowedSample],
             val_samples: list[PretextSample] | list[WindowedSample],
             tconfig: TrainConfig, mconfig: ModelConfig) -> Checkpoint:
    """Train the direction classifier from scratch; return the best-epoch checkpoint."""
    train = _coerce_pretext(pretext_samples)
    val = _coerce_pretext(val_samples)
    params = network.init_params(mconfig, derive_seed(tconfig.seed, _SEED_INIT))
    best, history, best_epoch, best_val = _fit_loop(train, val, params, tconfig, mconfig)
    return Checkpoint(model_config=mconfig, tensors=best,
                      metadata=_metadata("pretext", tconfig, history, best_epoch, best_val))


def _coerce_pretext(samples) -> list[WindowedSample]:
    if samples and isinstance(samples[0], PretextSample):
        return pretext_to_samples(samples)
    return list(samples)


def _initial_params(tconfig: TrainConfig, mconfig: ModelConfig) -> dict[str, ad.Tensor]:
    if tconfig.init_from is None:
        return network.init_params(mconfig, derive_seed(tconfig.seed, _SEED_INIT))
    source = tconfig.init_from
    checkpoint = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    if checkpoint.model_config != mconfig:
        raise CheckpointError(
            "checkpoint model config does not match the requested config:\n"
            f"checkpoint: {checkpoint.model_config}\nrequested: {mconfig}")
    params = {name: ad.parameter(arr.copy()) for name, arr in checkpoint.tensors.items()}
    expected = set(network.init_params(mconfig, 0))
    if set(params) != expected:
        raise CheckpointError(
            f"checkpoint tensor names do not match the architecture: "
            f"missing {sorted(expected - set(params))}, extra {sorted(set(params) - expected)}")
    if tconfig.reinit_head:
        fresh = network.init_head(mconfig, derive_seed(tconfig.seed, _SEED_HEAD))
        for name, arr in fresh.items():
            params[name] = ad.parameter(arr)
    return params


def finetune(train: Dataset, val: Dataset, test: Dataset,
             tconfig: TrainConfig, mconfig: ModelConfig,
             fold_index: int = 0) -> tuple[FoldResult, Checkpoint]:
    """Train on class labels (optionally from a pretext checkpoint).

    All layers stay trainable; when ``reinit_head`` is set and a checkpoint
    is given, only the final output layer is freshly initialized. Test AUC
    is reported at the best-validation epoch.
    """
    for name, split in (("train", train), ("val", val), ("test", test)):
        if len(split) == 0:
            raise TrainingError(f"finetune: {name} split is empty")
    train_s = windowed_samples(train, mconfig.window_len, tconfig.normalize)
    val_s = windowed_samples(val, mconfig.window_len, tconfig.normalize)
    test_s = windowed_samples(test, mconfig.window_len, tconfig.normalize)

    params = _initial_params(tconfig, mconfig)
    best, history, best_epoch, best_val = _fit_loop(train_s, val_s, params, tconfig, mconfig)
    for name, t in params.items():
        t.data = best[name].copy()
    probas = predict_probas(params, mconfig, test_s)
    test_auc = auc(ScoredSet(scores=probas[:, 1], labels=np.array([s.label for s in test_s])))

    result = FoldResult(fold_index=fold_index, best_val_auc=best_val, test_auc=float(test_auc),
                        epochs_to_best=best_epoch, history=history)
    checkpoint = Checkpoint(model_config=mconfig, tensors=best,
                            metadata=_metadata("finetune", tconfig, history, best_epoch, best_val))
    return result, checkpoint


def kfold_run(dataset: Dataset, k: int, spec: SplitSpec,
              tconfig: TrainConfig, mconfig: ModelConfig,
              return_checkpoints: bool = False):
    """Fixed val/test holdouts; the training pool is partitioned into k folds
    and each run trains on k-1 of them (its own fold is simply left out)."""
    if k < 2:
        raise TrainingError(f"kfold_run: k must be >= 2, got {k}")
    pool, val, test = stratified_split(dataset, spec)
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(pool.records):
        by_class.setdefault(r.label, []).append(i)
    if any(len(ix) < k for ix in by_class.values()):
        raise TrainingError(f"kfold_run: every class needs >= k={k} records in the pool")
    rng = np.random.default_rng(derive_seed(spec.seed, _SEED_FOLD))
    fold_of = np.zeros(len(pool.records), dtype=np.int64)
    for c in sorted(by_class):
        order = rng.permutation(by_class[c])
        for pos, record_index in enumerate(order):
            fold_of[record_index] = pos % k
    results = []
    checkpoints = []
    for fold in range(k):
        keep = [r for i, r in enumerate(pool.records) if fold_of[i] != fold]
        train = Dataset(records=keep, class_names=list(dataset.class_names),
                        provenance=dataset.provenance)
        run_config = replace(tconfig, seed=derive_seed(tconfig.seed, _SEED_FOLD, fold))
        result, checkpoint = finetune(train, val, test, run_config, mconfig, fold_index=fold)
        results.append(result)
        checkpoints.append(checkpoint)
    if return_checkpoints:
        return results, checkpoints
    return results


# ---------------------------------------------------------------------------
# subjects-per-class sweep


@dataclass(frozen=True)
class SweepRun:
    """One cell of the sweep grid."""

    dataset: str
    arm: str
    subjects_per_class: int
    repeat: int
    test_auc: float
    epochs_to_best: int
    best_val_auc: float
    seed: int


def _run_sweep_task(args) -> SweepRun:
    dataset_tag, arm, size, repeat, train, val, test, tconfig, mconfig = args
    result, _ = finetune(train, val, test, tconfig, mconfig)
    return SweepRun(dataset=dataset_tag, arm=arm, subjects_per_class=size, repeat=repeat,
                    test_auc=result.test_auc, epochs_to_best=result.epochs_to_best,
                    best_val_auc=result.best_val_auc, seed=tconfig.seed)


def sweep_subjects_per_class(dataset: Dataset, sizes: list[int],
                             arms: dict[str, str | Path | Checkpoint | None],
                             repeats: int, tconfig: TrainConfig, mconfig: ModelConfig,
                             spec: SplitSpec, dataset_tag: str = "synthetic",
                             jobs: int = 1) -> list[SweepRun]:
    """Fine-tune every (size, arm, repeat) cell against shared holdouts.

    Subsampling is seeded per repeat only, so the same repeat uses nested
    subsets across sizes and identical subsets across arms; training seeds
    derive from (base seed, size, arm, repeat).
    """
    if repeats < 1:
        raise TrainingError(f"repeats must be >= 1, got {repeats}")
    pool, val, test = stratified_split(dataset, spec)
    arm_tags = sorted(arms)
    tasks = []
    for size in sizes:
        for arm_index, arm in enumerate(arm_tags):
            for repeat in range(repeats):
                subset = subsample_per_class(pool, size,
                                             derive_seed(tconfig.seed, _SEED_SUBSAMPLE, repeat))
                run_config = replace(
                    tconfig,
                    seed=derive_seed(tconfig.seed, size, arm_index, repeat),
                    init_from=arms[arm],
                )
                tasks.append((dataset_tag, arm, size, repeat, subset, val, test,
                              run_config, mconfig))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool_exec:
            return list(pool_exec.map(_run_sweep_task, tasks))
    return [_run_sweep_task(t) for t in tasks]
