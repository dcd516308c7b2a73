import numpy as np
import pytest

from timearrow.data import Dataset, SubjectRecord
from timearrow.network import ModelConfig

# every layer present, everything small; used wherever speed matters
TINY_CONFIG = ModelConfig(
    components=4, window_len=8, conv_channels=(3, 3, 3), conv_kernels=(2, 2, 2),
    encoder_dim=6, lstm_hidden=5, attention_dim=5, head_hidden=5, n_classes=2,
)


def make_record(rng, components=4, timepoints=32, label=0, subject_id="s0"):
    return SubjectRecord(
        subject_id=subject_id,
        label=label,
        matrix=rng.standard_normal((components, timepoints)).astype(np.float32),
    )


def make_dataset(rng, n_per_class=(5, 5), components=4, timepoints=32):
    records = []
    for label, count in enumerate(n_per_class):
        for i in range(count):
            records.append(make_record(rng, components, timepoints, label,
                                       subject_id=f"c{label}-s{i:03d}"))
    return Dataset(records=records,
                   class_names=[f"class{i}" for i in range(len(n_per_class))],
                   provenance="test")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
