"""Reverse-mode automatic differentiation over dense tensors.

A :class:`Tensor` wraps a row-major numpy buffer (float32 in production;
float64 is also accepted so numeric checks can recompute forward passes at
higher precision). Operations record themselves on the innermost active
:class:`ComputationTape`; :func:`backward` replays the tape in strict
reverse recording order and accumulates into per-tensor ``grad`` buffers.

Conventions, fixed for determinism and documented here once:

- convolutions are "valid" (no padding),
- ``leaky_relu`` uses ``slope`` as the subgradient at exactly 0,
- ``cross_entropy`` floors probabilities at ``PROB_FLOOR`` before the log,
- reduction order inside each op is fixed, so repeated forward passes on
  identical input are bit-identical.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "PROB_FLOOR",
    "ShapeError",
    "Tensor",
    "ComputationTape",
    "parameter",
    "current_tape",
    "backward",
    "zero_grad",
    "matmul",
    "conv1d",
    "conv1d_output_length",
    "leaky_relu",
    "softmax",
    "sigmoid",
    "tanh",
    "add",
    "mul",
    "scale",
    "concat",
    "slice2d",
    "reshape",
    "transpose",
    "sum_all",
    "cross_entropy",
    "finite_difference_check",
]

PROB_FLOOR = 1e-12

_ALLOWED_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes (or dtypes) are incompatible for the requested op."""


class Tensor:
    """Dense row-major array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        if dtype not in _ALLOWED_DTYPES:
            raise ShapeError(f"unsupported dtype {dtype!r}; use float32 or float64")
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def parameter(data, dtype=np.float32) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def _wrap(data: np.ndarray, requires_grad: bool) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = requires_grad
    out.node_id = None
    return out


class _TapeNode:
    __slots__ = ("kind", "input_ids", "output", "backward_fn")

    def __init__(self, kind: str, input_ids: tuple[int, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], None]):
        self.kind = kind
        self.input_ids = input_ids
        self.output = output
        self.backward_fn = backward_fn


_STATE = threading.local()


def _tape_stack() -> list["ComputationTape"]:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def current_tape() -> "ComputationTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class ComputationTape:
    """Append-only record of operations, replayed in reverse by ``backward``.

    A tape and the tensors recorded on it belong to a single logical thread;
    independent tapes may run concurrently. Node ids increase monotonically,
    so every node's inputs reference earlier ids by construction.
    """

    def __init__(self):
        self.nodes: list[_TapeNode] = []
        self.next_id = 0
        self._ids: dict[int, int] = {}

    def __enter__(self) -> "ComputationTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False

    def _assign_id(self, t: Tensor) -> int:
        nid = self._ids.get(id(t))
        if nid is None:
            nid = self.next_id
            self.next_id += 1
            self._ids[id(t)] = nid
            t.node_id = nid
        return nid

    def record(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor,
               backward_fn: Callable[[np.ndarray], None]) -> None:
        input_ids = tuple(self._assign_id(t) for t in inputs)
        out_id = self.next_id
        self.next_id += 1
        self._ids[id(output)] = out_id
        output.node_id = out_id
        self.nodes.append(_TapeNode(kind, input_ids, output, backward_fn))

    def contains(self, t: Tensor) -> bool:
        return id(t) in self._ids


def _result(kind: str, inputs: tuple[Tensor, ...], data: np.ndarray,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = _wrap(data, requires)
    if requires:
        tape = current_tape()
        if tape is not None:
            tape.record(kind, inputs, out, backward_fn)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _common_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"mixed dtypes: {dt} vs {t.data.dtype}")
    return dt


def zero_grad(params: Iterable[Tensor] | Mapping[str, Tensor]) -> None:
    """Reset gradient buffers to exact zeros (callers do this between steps)."""
    tensors = params.values() if isinstance(params, Mapping) else params
    for t in tensors:
        t.zero_grad()


def backward(loss: Tensor, tape: ComputationTape) -> None:
    """Populate ``grad`` for every tensor reachable from a scalar ``loss``.

    Repeated calls without ``zero_grad`` accumulate. Tensors that do not
    influence the loss keep whatever their buffer already holds (exact
    zeros after ``zero_grad``).
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward expects a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        return  # constant with respect to every parameter
    if not tape.contains(loss):
        raise ValueError("loss was not recorded on this tape")
    for node in tape.nodes:  # leaf tensors are never node outputs, so they keep accumulating
        node.output.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        node.backward_fn(g)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    _common_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.dims[1] != b.dims[0]:
        raise ShapeError(f"matmul: incompatible dims {a.dims} x {b.dims}")
    out = a.data @ b.data

    def backward_fn(g: np.ndarray) -> None:
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result("matmul", (a, b), out, backward_fn)


def conv1d_output_length(length: int, kernel: int, stride: int) -> int:
    return (length - kernel) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 1-D convolution.

    ``x`` is ``(C_in, L)`` or batched ``(B, C_in, L)``; ``weight`` is
    ``(C_out, C_in, K)``; ``bias`` is ``(C_out,)``. Output length is
    ``(L - K) // stride + 1``.
    """
    _common_dtype(x, weight, bias)
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}")
    if weight.data.ndim != 3:
        raise ShapeError(f"conv1d: weight must be (C_out, C_in, K), got {weight.dims}")
    squeeze = x.data.ndim == 2
    xd = x.data[None, :, :] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeError(f"conv1d: input must be 2-D or 3-D, got {x.dims}")
    n_batch, c_in, length = xd.shape
    c_out, c_w, kernel = weight.dims
    if c_w != c_in:
        raise ShapeError(f"conv1d: input channels {c_in} != weight channels {c_w}")
    if bias.dims != (c_out,):
        raise ShapeError(f"conv1d: bias dims {bias.dims} != ({c_out},)")
    if length < kernel:
        raise ShapeError(f"conv1d: input length {length} < kernel size {kernel}")
    l_out = conv1d_output_length(length, kernel, stride)

    windows = np.lib.stride_tricks.sliding_window_view(xd, kernel, axis=2)
    cols = np.ascontiguousarray(windows[:, :, ::stride, :].transpose(0, 2, 1, 3))
    cols2 = cols.reshape(n_batch * l_out, c_in * kernel)
    w2 = weight.data.reshape(c_out, c_in * kernel)
    out2 = cols2 @ w2.T
    out2 += bias.data
    out = np.ascontiguousarray(out2.reshape(n_batch, l_out, c_out).transpose(0, 2, 1))
    if squeeze:
        out = out[0]

    def backward_fn(g: np.ndarray) -> None:
        g3 = g[None, :, :] if squeeze else g
        g2 = np.ascontiguousarray(g3.transpose(0, 2, 1)).reshape(n_batch * l_out, c_out)
        _accum(bias, g3.sum(axis=(0, 2)))
        _accum(weight, (g2.T @ cols2).reshape(c_out, c_in, kernel))
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n_batch, l_out, c_in, kernel).transpose(0, 2, 1, 3)
            dx = np.zeros_like(xd)
            for k in range(kernel):
                dx[:, :, k:k + stride * l_out:stride] += dcols[:, :, :, k]
            _accum(x, dx[0] if squeeze else dx)

    return _result("conv1d", (x, weight, bias), out, backward_fn)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """Elementwise ``max(x, slope * x)``; subgradient at 0 is ``slope``."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu: slope must be in (0, 1), got {slope}")
    dt = x.data.dtype
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * dt.type(slope))

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, g * np.where(pos, dt.type(1.0), dt.type(slope)))

    return _result("leaky_relu", (x,), out, backward_fn)


def softmax(x: Tensor) -> Tensor:
    """Stable softmax of a 1-D tensor (max subtraction, full Jacobian)."""
    if x.data.ndim != 1 or x.size < 1:
        raise ShapeError(f"softmax: expects a nonempty 1-D tensor, got dims {x.dims}")
    shifted = x.data - x.data.max()
    # floor at the smallest normal float so huge score spreads cannot
    # underflow an output to exactly zero
    e = np.maximum(np.exp(shifted), np.finfo(x.data.dtype).tiny)
    s = e / e.sum()

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, s * (g - np.dot(g, s)))

    return _result("softmax", (x,), s, backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, g * (out * (1.0 - out)))

    return _result("sigmoid", (x,), out, backward_fn)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, g * (1.0 - out * out))

    return _result("tanh", (x,), out, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias broadcast over rows of 2-D ``a``."""
    _common_dtype(a, b)
    bias_broadcast = (a.data.ndim == 2 and b.data.ndim == 1 and b.dims[0] == a.dims[1])
    if not bias_broadcast and a.dims != b.dims:
        raise ShapeError(f"add: incompatible dims {a.dims} vs {b.dims}")
    out = a.data + b.data

    def backward_fn(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g.sum(axis=0) if bias_broadcast else g)

    return _result("add", (a, b), out, backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _common_dtype(a, b)
    if a.dims != b.dims:
        raise ShapeError(f"mul: incompatible dims {a.dims} vs {b.dims}")
    out = a.data * b.data

    def backward_fn(g: np.ndarray) -> None:
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result("mul", (a, b), out, backward_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python constant (no gradient for the constant)."""
    c = x.data.dtype.type(factor)
    out = x.data * c

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, g * c)

    return _result("scale", (x,), out, backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other dims must match."""
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    _common_dtype(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.dims[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accum(t, piece)

    return _result("concat", tuple(tensors), out, backward_fn)


def slice2d(x: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    """Contiguous block ``x[r0:r1, c0:c1]`` of a 2-D tensor."""
    rows, cols = x.dims if x.data.ndim == 2 else (None, None)
    if rows is None or not (0 <= r0 < r1 <= rows and 0 <= c0 < c1 <= cols):
        raise ShapeError(f"slice2d: invalid block [{r0}:{r1}, {c0}:{c1}] of dims {x.dims}")
    out = x.data[r0:r1, c0:c1]

    def backward_fn(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[r0:r1, c0:c1] += g

    return _result("slice2d", (x,), out, backward_fn)


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(dims))

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, g.reshape(x.dims))

    return _result("reshape", (x,), out, backward_fn)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expects a 2-D tensor, got dims {x.dims}")
    out = x.data.T

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, g.T)

    return _result("transpose", (x,), out, backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, np.full_like(x.data, g))

    return _result("sum_all", (x,), out, backward_fn)


def cross_entropy(probs: Tensor, true_class: int) -> Tensor:
    """Negative log probability of ``true_class``, floored at ``PROB_FLOOR``.

    Composed with :func:`softmax` this realizes the usual fused gradient
    ``probs - onehot`` at the logits.
    """
    if probs.data.ndim != 1:
        raise ShapeError(f"cross_entropy: expects 1-D probabilities, got dims {probs.dims}")
    if not 0 <= true_class < probs.size:
        raise IndexError(f"cross_entropy: class {true_class} out of range for {probs.size} classes")
    dt = probs.data.dtype
    p = max(float(probs.data[true_class]), PROB_FLOOR)
    out = np.asarray(-math.log(p), dtype=dt)

    def backward_fn(g: np.ndarray) -> None:
        if not probs.requires_grad:
            return
        d = np.zeros_like(probs.data)
        d[true_class] = -float(g) / p
        _accum(probs, d)

    return _result("cross_entropy", (probs,), out, backward_fn)


# ---------------------------------------------------------------------------
# numeric verification


def finite_difference_check(
    forward_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-3,
    samples_per_tensor: int = 10,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The analytic side runs ``forward_fn`` once on ``params`` as given
    (typically float32) and backpropagates. The numeric side re-evaluates
    the forward pass in float64 at ``p +/- eps`` for a random subsample of
    scalar entries per tensor. Relative error is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    zero_grad(params)
    with ComputationTape() as tape:
        loss = forward_fn(params)
    backward(loss, tape)
    analytic = {name: t.grad.reshape(-1).copy() for name, t in params.items()}

    params64 = {
        name: Tensor(t.data.astype(np.float64), requires_grad=True, dtype=np.float64)
        for name, t in params.items()
    }
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(params):
        flat = params64[name].data.reshape(-1)
        n = flat.size
        picks = rng.choice(n, size=min(samples_per_tensor, n), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(forward_fn(params64).data)
            flat[i] = orig - eps
            f_minus = float(forward_fn(params64).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic_i = float(analytic[name][i])
            err = abs(analytic_i - numeric) / max(1e-8, abs(analytic_i) + abs(numeric))
            worst = max(worst, err)
    return worst
