"""Finite-difference verification of every differentiable primitive and of
the full model at a reduced configuration.

Each check builds a tiny scalar loss around one primitive, runs
:func:`timearrow.autodiff.finite_difference_check`, and reports the max
relative error. The optional ``corrupt_op`` hook deliberately perturbs one
op's forward output after it is recorded, which desynchronizes the
analytic and numeric paths; it exists so the failure path of the gradcheck
command is itself testable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from timearrow import autodiff as ad
from timearrow import network
from timearrow.network import ModelConfig

__all__ = ["GradCheckResult", "run_gradcheck", "TINY_CONFIG", "DEFAULT_TOLERANCE"]

DEFAULT_TOLERANCE = 1e-4

# reduced end-to-end configuration: every layer present, everything small
TINY_CONFIG = ModelConfig(
    components=4, window_len=8, conv_channels=(3, 3, 3), conv_kernels=(2, 2, 2),
    encoder_dim=6, lstm_hidden=5, attention_dim=5, head_hidden=5, n_classes=2,
)


@dataclass(frozen=True)
class GradCheckResult:
    op: str
    max_rel_error: float
    passed: bool


def _weights(rng: np.random.Generator, shape) -> np.ndarray:
    # fixed mixing constants so the scalar loss exercises every output entry
    return rng.uniform(-1.0, 1.0, size=shape)


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    # keep magnitudes well above the finite-difference step so kinked ops
    # (leaky_relu) are never probed across their corner
    signs = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return (signs * rng.uniform(0.1, 2.0, size=shape)).astype(np.float32)


def _mix_to_scalar(out: ad.Tensor, mix: np.ndarray) -> ad.Tensor:
    flat = ad.reshape(out, (out.size,))
    mix_t = ad.Tensor(mix, dtype=out.data.dtype)
    return ad.sum_all(ad.mul(flat, mix_t))


def _primitive_checks(seed: int) -> dict[str, tuple[dict[str, ad.Tensor], Callable]]:
    rng = np.random.default_rng(seed)
    checks: dict[str, tuple[dict[str, ad.Tensor], Callable]] = {}

    mix = _weights(rng, 4 * 5)
    params = {"a": ad.parameter(rng.standard_normal((4, 3)).astype(np.float32)),
              "b": ad.parameter(rng.standard_normal((3, 5)).astype(np.float32))}
    checks["matmul"] = (params, lambda p: _mix_to_scalar(ad.matmul(p["a"], p["b"]), mix))

    for stride in (1, 2):
        x = ad.parameter(rng.standard_normal((2, 3, 9)).astype(np.float32))
        w = ad.parameter(rng.standard_normal((4, 3, 3)).astype(np.float32))
        b = ad.parameter(rng.standard_normal(4).astype(np.float32))
        l_out = ad.conv1d_output_length(9, 3, stride)
        mix_c = _weights(rng, 2 * 4 * l_out)
        checks[f"conv1d(stride={stride})"] = (
            {"x": x, "w": w, "b": b},
            lambda p, s=stride, m=mix_c: _mix_to_scalar(ad.conv1d(p["x"], p["w"], p["b"], stride=s), m))

    x = ad.parameter(_away_from_zero(rng, (6, 7)))
    mix_r = _weights(rng, 42)
    checks["leaky_relu"] = ({"x": x}, lambda p: _mix_to_scalar(ad.leaky_relu(p["x"], 0.01), mix_r))

    x = ad.parameter(rng.standard_normal(9).astype(np.float32))
    mix_s = _weights(rng, 9)
    checks["softmax"] = ({"x": x}, lambda p: _mix_to_scalar(ad.softmax(p["x"]), mix_s))

    for name, op in (("sigmoid", ad.sigmoid), ("tanh", ad.tanh)):
        x = ad.parameter(rng.standard_normal((5, 4)).astype(np.float32))
        mix_e = _weights(rng, 20)
        checks[name] = ({"x": x}, lambda p, op=op, m=mix_e: _mix_to_scalar(op(p["x"]), m))

    a = ad.parameter(rng.standard_normal((4, 6)).astype(np.float32))
    b = ad.parameter(rng.standard_normal((4, 6)).astype(np.float32))
    mix_a = _weights(rng, 24)
    checks["add"] = ({"a": a, "b": b}, lambda p: _mix_to_scalar(ad.add(p["a"], p["b"]), mix_a))

    a = ad.parameter(rng.standard_normal((4, 6)).astype(np.float32))
    b = ad.parameter(rng.standard_normal(6).astype(np.float32))
    mix_ab = _weights(rng, 24)
    checks["add(bias)"] = ({"a": a, "b": b}, lambda p: _mix_to_scalar(ad.add(p["a"], p["b"]), mix_ab))

    a = ad.parameter(rng.standard_normal((3, 5)).astype(np.float32))
    b = ad.parameter(rng.standard_normal((3, 5)).astype(np.float32))
    mix_m = _weights(rng, 15)
    checks["mul"] = ({"a": a, "b": b}, lambda p: _mix_to_scalar(ad.mul(p["a"], p["b"]), mix_m))

    x = ad.parameter(rng.standard_normal((3, 4)).astype(np.float32))
    mix_sc = _weights(rng, 12)
    checks["scale"] = ({"x": x}, lambda p: _mix_to_scalar(ad.scale(p["x"], 0.37), mix_sc))

    a = ad.parameter(rng.standard_normal((2, 4)).astype(np.float32))
    b = ad.parameter(rng.standard_normal((3, 4)).astype(np.float32))
    mix_cc = _weights(rng, 20)
    checks["concat"] = ({"a": a, "b": b}, lambda p: _mix_to_scalar(ad.concat((p["a"], p["b"]), axis=0), mix_cc))

    x = ad.parameter(rng.standard_normal((5, 6)).astype(np.float32))
    mix_sl = _weights(rng, 6)
    checks["slice2d"] = ({"x": x}, lambda p: _mix_to_scalar(ad.slice2d(p["x"], 1, 3, 2, 5), mix_sl))

    x = ad.parameter(rng.standard_normal((4, 6)).astype(np.float32))
    mix_rs = _weights(rng, 24)
    checks["reshape"] = ({"x": x}, lambda p: _mix_to_scalar(ad.reshape(p["x"], (8, 3)), mix_rs))

    x = ad.parameter(rng.standard_normal((4, 6)).astype(np.float32))
    mix_t = _weights(rng, 24)
    checks["transpose"] = ({"x": x}, lambda p: _mix_to_scalar(ad.transpose(p["x"]), mix_t))

    x = ad.parameter(rng.standard_normal((3, 7)).astype(np.float32))
    checks["sum_all"] = ({"x": x}, lambda p: ad.sum_all(p["x"]))

    logits = ad.parameter(rng.standard_normal(4).astype(np.float32))
    checks["softmax+cross_entropy"] = (
        {"logits": logits}, lambda p: ad.cross_entropy(ad.softmax(p["logits"]), 2))

    return checks


def _end_to_end_check(seed: int) -> tuple[dict[str, ad.Tensor], Callable]:
    config = TINY_CONFIG
    params = network.init_params(config, seed)
    rng = np.random.default_rng(seed + 1)
    windows32 = rng.standard_normal((3, config.components, config.window_len)).astype(np.float32)

    def forward(p: dict[str, ad.Tensor]) -> ad.Tensor:
        dtype = next(iter(p.values())).data.dtype
        x = ad.Tensor(windows32.astype(dtype), dtype=dtype)
        probs = network.model_forward(x, p, config)
        return ad.cross_entropy(probs, 1)

    return params, forward


def run_gradcheck(seed: int = 0, tolerance: float = DEFAULT_TOLERANCE,
                  samples_per_tensor: int = 10, corrupt_op: str | None = None,
                  ) -> list[GradCheckResult]:
    """Check every primitive plus the reduced end-to-end model."""
    suites = _primitive_checks(seed)
    suites["end_to_end_model"] = _end_to_end_check(seed)
    results = []
    for op_name, (params, forward) in suites.items():
        fn = forward
        if corrupt_op == op_name:
            def fn(p, _inner=forward):  # type: ignore[misc]
                out = _inner(p)
                out.data = out.data * out.data.dtype.type(1.01)
                return out
        err = ad.finite_difference_check(fn, params, eps=1e-3,
                                         samples_per_tensor=samples_per_tensor, seed=seed)
        results.append(GradCheckResult(op=op_name, max_rel_error=err, passed=err <= tolerance))
    return results
