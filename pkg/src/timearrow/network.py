"""Conv / bidirectional-LSTM / attention classifier over windowed sequences.

The model encodes each window of a multichannel time series with a stack of
three 1-D convolutions plus a dense projection, runs the per-window
embeddings through a bidirectional LSTM, pools the step outputs with
additive attention into a single context vector, and classifies it with a
two-layer softmax head. All forward functions take a parameter map from
:func:`init_params` and run under whatever tape is active.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from timearrow import autodiff as ad
from timearrow.autodiff import ShapeError, Tensor

__all__ = [
    "ConfigError",
    "ModelConfig",
    "init_params",
    "param_count",
    "encoder_forward",
    "bilstm_forward",
    "attention_forward",
    "classifier_forward",
    "model_forward",
    "HEAD_OUTPUT_NAMES",
]

# final classification layer; the only tensors replaced when a pretrained
# checkpoint is fine-tuned with a fresh head
HEAD_OUTPUT_NAMES = ("head2.weight", "head2.bias")


class ConfigError(ValueError):
    """Model configuration violates a structural invariant."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; every parameter shape derives from these."""

    components: int = 53
    window_len: int = 20
    conv_channels: tuple[int, int, int] = (64, 128, 200)
    conv_kernels: tuple[int, int, int] = (4, 4, 3)
    encoder_dim: int = 256
    lstm_hidden: int = 200
    attention_dim: int = 128
    head_hidden: int = 200
    n_classes: int = 2
    leaky_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "conv_kernels", tuple(int(k) for k in self.conv_kernels))
        if len(self.conv_channels) != len(self.conv_kernels):
            raise ConfigError("conv_channels and conv_kernels must have equal length")
        dims = (self.components, self.window_len, self.encoder_dim, self.lstm_hidden,
                self.attention_dim, self.head_hidden) + self.conv_channels + self.conv_kernels
        if any(d < 1 for d in dims):
            raise ConfigError(f"all dims must be positive, got {self}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")
        if self.conv_output_len < 1:
            raise ConfigError(
                f"window_len {self.window_len} too short for kernels {self.conv_kernels}: "
                f"conv stack would leave {self.conv_output_len} time steps")

    @property
    def conv_lengths(self) -> tuple[int, ...]:
        """Time length after each conv layer (stride 1, valid)."""
        lengths = []
        length = self.window_len
        for k in self.conv_kernels:
            length = length - k + 1
            lengths.append(length)
        return tuple(lengths)

    @property
    def conv_output_len(self) -> int:
        return self.window_len - sum(k - 1 for k in self.conv_kernels)

    @property
    def flat_dim(self) -> int:
        return self.conv_channels[-1] * self.conv_output_len

    @property
    def context_dim(self) -> int:
        return 2 * self.lstm_hidden

    def to_text(self) -> str:
        """Canonical text form (sorted ``key=value`` lines) used in checkpoints."""
        values = {
            "attention_dim": self.attention_dim,
            "components": self.components,
            "conv_channels": ",".join(str(c) for c in self.conv_channels),
            "conv_kernels": ",".join(str(k) for k in self.conv_kernels),
            "encoder_dim": self.encoder_dim,
            "head_hidden": self.head_hidden,
            "leaky_slope": repr(self.leaky_slope),
            "lstm_hidden": self.lstm_hidden,
            "n_classes": self.n_classes,
            "window_len": self.window_len,
        }
        return "\n".join(f"{k}={values[k]}" for k in sorted(values)) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        fields_ = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            fields_[key] = value
        try:
            return cls(
                components=int(fields_["components"]),
                window_len=int(fields_["window_len"]),
                conv_channels=tuple(int(c) for c in fields_["conv_channels"].split(",")),
                conv_kernels=tuple(int(k) for k in fields_["conv_kernels"].split(",")),
                encoder_dim=int(fields_["encoder_dim"]),
                lstm_hidden=int(fields_["lstm_hidden"]),
                attention_dim=int(fields_["attention_dim"]),
                head_hidden=int(fields_["head_hidden"]),
                n_classes=int(fields_["n_classes"]),
                leaky_slope=float(fields_["leaky_slope"]),
            )
        except KeyError as exc:
            raise ConfigError(f"model config text missing field: {exc}") from exc


def _xavier(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Xavier-uniform weights, zero biases, LSTM forget-gate bias 1.0.

    Tensors are created in a fixed order, so the same (config, seed) always
    yields a bit-identical parameter map.
    """
    rng = np.random.default_rng(seed)
    h = config.lstm_hidden
    arrays: dict[str, np.ndarray] = {}

    c_in = config.components
    for i, (c_out, k) in enumerate(zip(config.conv_channels, config.conv_kernels), start=1):
        arrays[f"conv{i}.weight"] = _xavier(rng, (c_out, c_in, k), c_in * k, c_out * k)
        arrays[f"conv{i}.bias"] = np.zeros(c_out, dtype=np.float32)
        c_in = c_out

    arrays["encoder.weight"] = _xavier(rng, (config.flat_dim, config.encoder_dim),
                                       config.flat_dim, config.encoder_dim)
    arrays["encoder.bias"] = np.zeros(config.encoder_dim, dtype=np.float32)

    for direction in ("fwd", "bwd"):
        arrays[f"lstm_{direction}.w_ih"] = _xavier(rng, (config.encoder_dim, 4 * h),
                                                   config.encoder_dim, 4 * h)
        arrays[f"lstm_{direction}.w_hh"] = _xavier(rng, (h, 4 * h), h, 4 * h)
        bias = np.zeros(4 * h, dtype=np.float32)
        bias[h:2 * h] = 1.0  # forget gate
        arrays[f"lstm_{direction}.bias"] = bias

    arrays["attention.w"] = _xavier(rng, (config.attention_dim, config.context_dim),
                                    config.context_dim, config.attention_dim)
    arrays["attention.v"] = _xavier(rng, (config.attention_dim,), config.attention_dim, 1)

    arrays["head1.weight"] = _xavier(rng, (config.context_dim, config.head_hidden),
                                     config.context_dim, config.head_hidden)
    arrays["head1.bias"] = np.zeros(config.head_hidden, dtype=np.float32)
    arrays["head2.weight"] = _xavier(rng, (config.head_hidden, config.n_classes),
                                     config.head_hidden, config.n_classes)
    arrays["head2.bias"] = np.zeros(config.n_classes, dtype=np.float32)

    return {name: ad.parameter(a) for name, a in arrays.items()}


def init_head(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Fresh output-layer tensors (used when fine-tuning replaces the head)."""
    rng = np.random.default_rng(seed)
    return {
        "head2.weight": _xavier(rng, (config.head_hidden, config.n_classes),
                                config.head_hidden, config.n_classes),
        "head2.bias": np.zeros(config.n_classes, dtype=np.float32),
    }


def param_count(config: ModelConfig) -> int:
    """Total scalar count implied by the config (cross-checked against init_params)."""
    total = 0
    c_in = config.components
    for c_out, k in zip(config.conv_channels, config.conv_kernels):
        total += c_out * c_in * k + c_out
        c_in = c_out
    total += config.flat_dim * config.encoder_dim + config.encoder_dim
    h = config.lstm_hidden
    total += 2 * 4 * (h * (config.encoder_dim + h) + h)
    total += config.attention_dim * config.context_dim + config.attention_dim
    total += config.context_dim * config.head_hidden + config.head_hidden
    total += config.head_hidden * config.n_classes + config.n_classes
    return total


def encoder_forward(window: Tensor, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Per-window embedding: conv stack -> flatten -> dense, leaky-relu throughout.

    Accepts one window ``(components, window_len)`` giving ``(encoder_dim,)``,
    or a batch ``(B, components, window_len)`` giving ``(B, encoder_dim)``.
    """
    batched = window.data.ndim == 3
    expected = (config.components, config.window_len)
    got = window.dims[1:] if batched else window.dims
    if got != expected:
        raise ShapeError(f"encoder_forward: window dims {got} != {expected}")
    x = window
    for i in range(1, len(config.conv_channels) + 1):
        x = ad.conv1d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride=1)
        x = ad.leaky_relu(x, config.leaky_slope)
    n_rows = window.dims[0] if batched else 1
    flat = ad.reshape(x, (n_rows, config.flat_dim))
    z = ad.add(ad.matmul(flat, params["encoder.weight"]), params["encoder.bias"])
    z = ad.leaky_relu(z, config.leaky_slope)
    return z if batched else ad.reshape(z, (config.encoder_dim,))


def _lstm_direction(latents: Tensor, params: dict[str, Tensor], prefix: str,
                    hidden: int, reverse: bool) -> list[Tensor]:
    """One LSTM pass; returns the hidden state per original time index.

    Gate block order in the packed weights is (input, forget, output, cell);
    initial hidden and cell states are zero, so the first step skips the
    recurrent term entirely.
    """
    n_steps = latents.dims[0]
    w_ih = params[f"{prefix}.w_ih"]
    w_hh = params[f"{prefix}.w_hh"]
    bias = params[f"{prefix}.bias"]
    projected = ad.add(ad.matmul(latents, w_ih), bias)  # (T, 4H)

    order = range(n_steps - 1, -1, -1) if reverse else range(n_steps)
    outputs: list[Tensor | None] = [None] * n_steps
    h: Tensor | None = None
    c: Tensor | None = None
    for t in order:
        z = ad.slice2d(projected, t, t + 1, 0, 4 * hidden)
        if h is not None:
            z = ad.add(z, ad.matmul(h, w_hh))
        gates = ad.sigmoid(ad.slice2d(z, 0, 1, 0, 3 * hidden))
        gate_in = ad.slice2d(gates, 0, 1, 0, hidden)
        gate_forget = ad.slice2d(gates, 0, 1, hidden, 2 * hidden)
        gate_out = ad.slice2d(gates, 0, 1, 2 * hidden, 3 * hidden)
        candidate = ad.tanh(ad.slice2d(z, 0, 1, 3 * hidden, 4 * hidden))
        fresh = ad.mul(gate_in, candidate)
        c = fresh if c is None else ad.add(ad.mul(gate_forget, c), fresh)
        h = ad.mul(gate_out, ad.tanh(c))
        outputs[t] = h
    return outputs  # type: ignore[return-value]


def bilstm_forward(latents: Tensor, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Bidirectional LSTM over per-window embeddings.

    ``latents`` is ``(T_w, encoder_dim)``; the result is ``(T_w, 2 * lstm_hidden)``
    with ``[forward_h_t ; backward_h_t]`` per step.
    """
    if latents.data.ndim != 2 or latents.dims[1] != config.encoder_dim:
        raise ShapeError(f"bilstm_forward: latents dims {latents.dims} != (T, {config.encoder_dim})")
    h = config.lstm_hidden
    fwd = _lstm_direction(latents, params, "lstm_fwd", h, reverse=False)
    bwd = _lstm_direction(latents, params, "lstm_bwd", h, reverse=True)
    rows = [ad.concat((fwd[t], bwd[t]), axis=1) for t in range(latents.dims[0])]
    return ad.concat(rows, axis=0) if len(rows) > 1 else ad.reshape(rows[0], (1, config.context_dim))


def attention_forward(h_seq: Tensor, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Additive attention pooling of step outputs into one context vector.

    ``score_t = v . tanh(W h_t)``; the weights are a softmax over steps and
    the context is their convex combination of ``h_t`` rows.
    """
    if h_seq.data.ndim != 2 or h_seq.dims[1] != config.context_dim:
        raise ShapeError(f"attention_forward: dims {h_seq.dims} != (T, {config.context_dim})")
    n_steps = h_seq.dims[0]
    hidden = ad.tanh(ad.matmul(h_seq, ad.transpose(params["attention.w"])))
    scores = ad.matmul(hidden, ad.reshape(params["attention.v"], (config.attention_dim, 1)))
    weights = ad.softmax(ad.reshape(scores, (n_steps,)))
    context = ad.matmul(ad.reshape(weights, (1, n_steps)), h_seq)
    return ad.reshape(context, (config.context_dim,))


def classifier_forward(context: Tensor, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Two dense layers and a softmax over classes."""
    if context.dims != (config.context_dim,):
        raise ShapeError(f"classifier_forward: context dims {context.dims} != ({config.context_dim},)")
    x = ad.reshape(context, (1, config.context_dim))
    x = ad.add(ad.matmul(x, params["head1.weight"]), params["head1.bias"])
    x = ad.leaky_relu(x, config.leaky_slope)
    logits = ad.add(ad.matmul(x, params["head2.weight"]), params["head2.bias"])
    return ad.softmax(ad.reshape(logits, (config.n_classes,)))


def model_forward(sample, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Full pipeline on one windowed sample; returns class probabilities.

    ``sample`` is anything with a ``windows`` array of dims
    ``(T_w, components, window_len)`` (or such an array/Tensor directly).
    """
    windows = getattr(sample, "windows", sample)
    if not isinstance(windows, Tensor):
        arr = np.asarray(windows)
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        windows = Tensor(arr, dtype=dtype)
    if windows.data.ndim != 3:
        raise ShapeError(f"model_forward: windows must be 3-D, got dims {windows.dims}")
    latents = encoder_forward(windows, params, config)
    step_outputs = bilstm_forward(latents, params, config)
    context = attention_forward(step_outputs, params, config)
    return classifier_forward(context, params, config)
