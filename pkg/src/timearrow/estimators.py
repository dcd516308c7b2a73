"""Scikit-learn style estimators wrapping the two training phases.

``X`` everywhere is a sequence of ``(components, timepoints)`` arrays (or a
3-D array); matrices may have any length that fits at least one window.
Both estimators are deterministic functions of their parameters, the data,
and ``seed``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from timearrow import training
from timearrow.checkpoint import Checkpoint
from timearrow.data import SplitSpec, stratified_split
from timearrow.metrics import ScoredSet, auc
from timearrow.network import ModelConfig
from timearrow.training import TrainConfig, TrainingError
from timearrow.validation import check_binary_labels, check_time_courses, records_from_arrays

__all__ = ["TimeDirectionPretrainer", "WindowedSequenceClassifier"]


def _model_config(est, components: int) -> ModelConfig:
    return ModelConfig(
        components=components,
        window_len=est.window_len,
        conv_channels=tuple(est.conv_channels),
        conv_kernels=tuple(est.conv_kernels),
        encoder_dim=est.encoder_dim,
        lstm_hidden=est.lstm_hidden,
        attention_dim=est.attention_dim,
        head_hidden=est.head_hidden,
        n_classes=2,
        leaky_slope=est.leaky_slope,
    )


def _train_config(est, init_from=None, reinit_head=True) -> TrainConfig:
    return TrainConfig(
        learning_rate=est.learning_rate,
        batch_size=est.batch_size,
        max_epochs=est.max_epochs,
        patience=est.patience,
        seed=est.seed,
        init_from=init_from,
        reinit_head=reinit_head,
        normalize=est.normalize,
    )


class TimeDirectionPretrainer(BaseEstimator):
    """Self-supervised pretrainer: forward vs. time-reversed sequences.

    ``fit`` ignores ``y``; it labels each subject's windowed sequence 0 and
    its full-matrix reversal 1, holds out a subject-level validation split
    (twins stay together), and trains with early stopping on validation
    AUC. The best-epoch weights are exposed as ``checkpoint_``.
    """

    def __init__(self, window_len=20, learning_rate=2e-4, batch_size=32, max_epochs=100,
                 patience=10, val_fraction=0.2, normalize=True, seed=0,
                 conv_channels=(64, 128, 200), conv_kernels=(4, 4, 3), encoder_dim=256,
                 lstm_hidden=200, attention_dim=128, head_hidden=200, leaky_slope=0.01):
        self.window_len = window_len
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.normalize = normalize
        self.seed = seed
        self.conv_channels = conv_channels
        self.conv_kernels = conv_kernels
        self.encoder_dim = encoder_dim
        self.lstm_hidden = lstm_hidden
        self.attention_dim = attention_dim
        self.head_hidden = head_hidden
        self.leaky_slope = leaky_slope

    def fit(self, X, y=None):
        matrices = check_time_courses(X, min_timepoints=self.window_len)
        dataset = records_from_arrays(matrices)
        val_size = max(1, int(round(self.val_fraction * len(dataset))))
        if val_size >= len(dataset):
            raise TrainingError(
                f"val_fraction {self.val_fraction} leaves no training subjects for n={len(dataset)}")
        self.model_config_ = _model_config(self, matrices[0].shape[0])
        train_s, val_s, _ = training.pretext_splits(
            dataset, self.window_len, val_size=val_size, test_size=0,
            seed=self.seed, normalize=self.normalize)
        self.checkpoint_ = training.pretrain(train_s, val_s, _train_config(self), self.model_config_)
        self.best_val_auc_ = float(self.checkpoint_.metadata["best_val_auc"])
        self.epochs_to_best_ = int(self.checkpoint_.metadata["epochs_to_best"])
        return self

    def _require_fitted(self):
        if not hasattr(self, "checkpoint_"):
            raise TrainingError("estimator is not fitted; call fit first")

    def predict_proba(self, X):
        """Probability that each sequence runs in reversed time."""
        self._require_fitted()
        matrices = check_time_courses(X, min_timepoints=self.window_len)
        dataset = records_from_arrays(matrices)
        samples = training.windowed_samples(dataset, self.window_len, self.normalize)
        params = {k: training.ad.parameter(v.copy()) for k, v in self.checkpoint_.tensors.items()}
        probas = training.predict_probas(params, self.model_config_, samples)
        return probas

    def score(self, X, y=None):
        """Pretext AUC on held-out subjects: forward and reversed twins of X."""
        self._require_fitted()
        matrices = check_time_courses(X, min_timepoints=self.window_len)
        dataset = records_from_arrays(matrices)
        from timearrow.data import make_pretext_dataset, normalize_dataset

        ds = normalize_dataset(dataset) if self.normalize else dataset
        samples = training.pretext_to_samples(make_pretext_dataset(ds, self.window_len))
        params = {k: training.ad.parameter(v.copy()) for k, v in self.checkpoint_.tensors.items()}
        probas = training.predict_probas(params, self.model_config_, samples)
        labels = np.array([s.label for s in samples])
        return auc(ScoredSet(scores=probas[:, 1], labels=labels))

    def save_checkpoint(self, path):
        from timearrow.checkpoint import save_checkpoint

        self._require_fitted()
        return save_checkpoint(self.checkpoint_, path)


class WindowedSequenceClassifier(BaseEstimator, ClassifierMixin):
    """Binary classifier over windowed sequences, optionally warm-started.

    ``init_from`` accepts a checkpoint path or object produced by
    :class:`TimeDirectionPretrainer` (the final output layer is freshly
    initialized unless ``reinit_head=False``). With ``init_from=None`` the
    model trains from scratch. A validation split for early stopping is
    carved from the training data unless given explicitly to ``fit``.
    """

    def __init__(self, window_len=20, learning_rate=2e-4, batch_size=32, max_epochs=100,
                 patience=10, val_fraction=0.2, normalize=True, seed=0,
                 init_from=None, reinit_head=True,
                 conv_channels=(64, 128, 200), conv_kernels=(4, 4, 3), encoder_dim=256,
                 lstm_hidden=200, attention_dim=128, head_hidden=200, leaky_slope=0.01):
        self.window_len = window_len
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.normalize = normalize
        self.seed = seed
        self.init_from = init_from
        self.reinit_head = reinit_head
        self.conv_channels = conv_channels
        self.conv_kernels = conv_kernels
        self.encoder_dim = encoder_dim
        self.lstm_hidden = lstm_hidden
        self.attention_dim = attention_dim
        self.head_hidden = head_hidden
        self.leaky_slope = leaky_slope

    def fit(self, X, y, X_val=None, y_val=None):
        matrices = check_time_courses(X, min_timepoints=self.window_len)
        labels, classes = check_binary_labels(y, len(matrices))
        self.classes_ = classes
        self.model_config_ = _model_config(self, matrices[0].shape[0])
        tconfig = _train_config(self, init_from=self.init_from, reinit_head=self.reinit_head)

        dataset = records_from_arrays(matrices, labels, class_names=[str(c) for c in classes])
        if X_val is not None:
            if y_val is None:
                raise TrainingError("X_val given without y_val")
            val_matrices = check_time_courses(X_val, min_timepoints=self.window_len)
            val_labels = np.asarray([int(v == classes[1]) for v in np.asarray(y_val)])
            train_ds = dataset
            val_ds = records_from_arrays(val_matrices, val_labels,
                                         class_names=[str(c) for c in classes])
        else:
            val_size = max(2, int(round(self.val_fraction * len(dataset))))
            if val_size >= len(dataset):
                raise TrainingError(
                    f"val_fraction {self.val_fraction} leaves no training subjects for "
                    f"n={len(dataset)}; pass X_val explicitly")
            train_ds, val_ds, _ = stratified_split(
                dataset, SplitSpec(val_size=val_size, test_size=0, seed=self.seed))

        train_s = training.windowed_samples(train_ds, self.window_len, self.normalize)
        val_s = training.windowed_samples(val_ds, self.window_len, self.normalize)
        params = training._initial_params(tconfig, self.model_config_)
        best, history, best_epoch, best_val = training._fit_loop(
            train_s, val_s, params, tconfig, self.model_config_)
        self.tensors_ = best
        self.history_ = history
        self.epochs_to_best_ = best_epoch
        self.best_val_auc_ = best_val
        return self

    def _require_fitted(self):
        if not hasattr(self, "tensors_"):
            raise TrainingError("estimator is not fitted; call fit first")

    def predict_proba(self, X):
        self._require_fitted()
        matrices = check_time_courses(X, min_timepoints=self.window_len)
        dataset = records_from_arrays(matrices)
        samples = training.windowed_samples(dataset, self.window_len, self.normalize)
        params = {k: training.ad.parameter(v.copy()) for k, v in self.tensors_.items()}
        return training.predict_probas(params, self.model_config_, samples)

    def predict(self, X):
        probas = self.predict_proba(X)
        return self.classes_[(probas[:, 1] >= 0.5).astype(int)]

    def checkpoint(self) -> Checkpoint:
        """The fitted weights as a saveable checkpoint."""
        self._require_fitted()
        return Checkpoint(model_config=self.model_config_, tensors=dict(self.tensors_),
                          metadata={"phase": "finetune", "seed": str(self.seed)})
