"""Self-supervised time-direction pretraining for windowed multichannel time series.

The package trains a conv/biLSTM/attention classifier to tell whether a
multichannel time course runs forward or reversed, then transfers those
weights to downstream binary classification. See the README for the CLI
workflow; the estimator API lives in :mod:`timearrow.estimators`.
"""

from timearrow.autodiff import ComputationTape, Tensor, backward, finite_difference_check
from timearrow.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from timearrow.data import (
    Dataset,
    PretextSample,
    SplitSpec,
    SubjectRecord,
    SynthConfig,
    WindowedSample,
    load_dataset,
    make_pretext_dataset,
    reverse_time,
    save_dataset,
    slice_windows,
    stratified_split,
    synth_generate,
    zscore_normalize,
)
from timearrow.estimators import TimeDirectionPretrainer, WindowedSequenceClassifier
from timearrow.metrics import ScoredSet, auc, roc_curve, summarize
from timearrow.network import ModelConfig, init_params, model_forward, param_count
from timearrow.training import FoldResult, TrainConfig, finetune, kfold_run, pretrain

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "Tensor",
    "ComputationTape",
    "backward",
    "finite_difference_check",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "Dataset",
    "SubjectRecord",
    "WindowedSample",
    "PretextSample",
    "SynthConfig",
    "SplitSpec",
    "load_dataset",
    "save_dataset",
    "synth_generate",
    "slice_windows",
    "reverse_time",
    "make_pretext_dataset",
    "zscore_normalize",
    "stratified_split",
    "TimeDirectionPretrainer",
    "WindowedSequenceClassifier",
    "ScoredSet",
    "auc",
    "roc_curve",
    "summarize",
    "ModelConfig",
    "init_params",
    "param_count",
    "model_forward",
    "TrainConfig",
    "FoldResult",
    "pretrain",
    "finetune",
    "kfold_run",
]
