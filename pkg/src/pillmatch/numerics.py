"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything trainable in the pipeline runs through the ops defined here. Forward
ops append an entry to the active tape whenever an input requires gradients;
``backward`` replays the tape in reverse and accumulates gradients on the
leaves. Scalars are shape-() tensors. The only broadcasting supported is a
(1, d) row vector against an (n, d) matrix.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "TapeEntry",
    "ShapeMismatch", "NonFiniteValue", "TapeError",
    "active_tape", "reset_tape", "fresh_tape", "no_grad",
    "backward", "finite_difference_check",
    "matmul", "add", "smul", "mul", "transpose", "reshape",
    "concat_rows", "concat_cols", "mean_rows", "sum_all",
    "sigmoid", "relu", "hinge", "gelu", "tanh", "softmax_rows",
    "l2norm_rows", "square", "clamp", "log",
    "layer_norm", "scale_rows", "cosine_similarity_matrix",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeMismatch(ValueError):
    """Operands do not conform for the attempted operation."""


class NonFiniteValue(ValueError):
    """A NaN or Inf reached an operation that requires finite values."""


class TapeError(RuntimeError):
    """backward() was called in a state the tape cannot serve."""


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "produced")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("tensor: constructed from non-finite data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.produced = False  # True once an op on the tape created this tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        """A constant copy sharing no gradient history."""
        return Tensor(self.data.copy())

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeEntry:
    """One executed op: its output, its inputs, and the local backward rule."""

    __slots__ = ("op", "output", "inputs", "vjp")

    def __init__(self, op: str, output: Tensor, inputs: tuple[Tensor, ...],
                 vjp: Callable[[np.ndarray], tuple]):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of executed ops; reverse replay yields gradients."""

    def __init__(self):
        self._entries: list[TapeEntry] = []

    def __len__(self) -> int:
        return len(self._entries)

    def clear(self) -> None:
        self._entries.clear()

    def entries(self) -> list[TapeEntry]:
        return self._entries


_TAPE_STACK: list[Tape] = [Tape()]
_RECORDING = True


def active_tape() -> Tape:
    return _TAPE_STACK[-1]


def reset_tape() -> None:
    """Drop all entries on the active tape."""
    _TAPE_STACK[-1].clear()


@contextlib.contextmanager
def fresh_tape():
    """Push a new empty tape for the duration of the block."""
    tape = Tape()
    _TAPE_STACK.append(tape)
    try:
        yield tape
    finally:
        _TAPE_STACK.pop()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (outputs become constants)."""
    global _RECORDING
    previous = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = previous


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteValue(f"{op}: non-finite input")


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteValue(f"{op}: non-finite output")
    track = _RECORDING and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = track
    out.grad = None
    out.produced = False
    if track:
        out.produced = True
        _TAPE_STACK[-1]._entries.append(TapeEntry(op, out, inputs, vjp))
    return out


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into every requires_grad leaf's .grad.

    Repeated calls without zeroing keep accumulating. The output must be a
    scalar produced through the active tape.
    """
    tape = _TAPE_STACK[-1]
    if len(tape) == 0:
        raise TapeError("backward: the active tape is empty")
    if output.data.size != 1:
        raise TapeError(f"backward: output must be a scalar, got shape {output.shape}")
    if not output.produced:
        raise TapeError("backward: output was not produced through the active tape")

    adjoint: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    holders: dict[int, Tensor] = {id(output): output}
    for entry in reversed(tape._entries):
        g = adjoint.pop(id(entry.output), None)
        if g is None:
            continue
        holders.pop(id(entry.output), None)
        for tensor, grad in zip(entry.inputs, entry.vjp(g)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in adjoint:
                adjoint[key] = adjoint[key] + grad
            else:
                adjoint[key] = grad
                holders[key] = tensor
    # Whatever was never consumed as an op output is a leaf.
    for key, grad in adjoint.items():
        leaf = holders[key]
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        leaf.grad += grad


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a.data @ b.data

    def vjp(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _record("matmul", (a, b), out, vjp)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> str:
    """Classify the supported operand layouts: exact match or row broadcast."""
    if a.shape == b.shape:
        return "same"
    if (a.data.ndim == 2 and b.data.ndim == 2
            and b.shape == (1, a.shape[1]) and a.shape[0] != 1):
        return "row_b"
    if (a.data.ndim == 2 and b.data.ndim == 2
            and a.shape == (1, b.shape[1]) and b.shape[0] != 1):
        return "row_a"
    raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("add", a, b)
    kind = _binary_shapes("add", a, b)
    out = a.data + b.data

    def vjp(g):
        ga = g if a.requires_grad else None
        gb = g if b.requires_grad else None
        if kind == "row_b" and gb is not None:
            gb = g.sum(axis=0, keepdims=True)
        if kind == "row_a" and ga is not None:
            ga = g.sum(axis=0, keepdims=True)
        return ga, gb

    return _record("add", (a, b), out, vjp)


def mul(a, b) -> Tensor:
    """Elementwise product; one operand may be a broadcast row vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("mul", a, b)
    kind = _binary_shapes("mul", a, b)
    out = a.data * b.data

    def vjp(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        if kind == "row_b" and gb is not None:
            gb = gb.sum(axis=0, keepdims=True)
        if kind == "row_a" and ga is not None:
            ga = ga.sum(axis=0, keepdims=True)
        return ga, gb

    return _record("mul", (a, b), out, vjp)


def smul(a, c: float) -> Tensor:
    a = _as_tensor(a)
    if not math.isfinite(c):
        raise NonFiniteValue("smul: non-finite scalar")
    _check_finite("smul", a)
    c = float(c)
    out = a.data * c

    def vjp(g):
        return (g * c,)

    return _record("smul", (a,), out, vjp)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite("transpose", a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose: expected a matrix, got shape {a.shape}")
    out = a.data.T.copy()

    def vjp(g):
        return (g.T,)

    return _record("transpose", (a,), out, vjp)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    _check_finite("reshape", a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {shape}")
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _record("reshape", (a,), out, vjp)


def concat_rows(parts: Sequence) -> Tensor:
    """Stack matrices vertically; all parts must share the same width."""
    tensors = tuple(_as_tensor(p) for p in parts)
    if len(tensors) < 1:
        raise ShapeMismatch("concat_rows: no inputs")
    _check_finite("concat_rows", *tensors)
    width = None
    for t in tensors:
        if t.data.ndim != 2:
            raise ShapeMismatch(f"concat_rows: expected matrices, got shape {t.shape}")
        if width is None:
            width = t.shape[1]
        elif t.shape[1] != width:
            raise ShapeMismatch(f"concat_rows: widths differ ({width} vs {t.shape[1]})")
    out = np.concatenate([t.data for t in tensors], axis=0)
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] if t.requires_grad else None
                     for i, t in enumerate(tensors))

    return _record("concat_rows", tensors, out, vjp)


def concat_cols(parts: Sequence) -> Tensor:
    """Stack matrices side by side; all parts must share the same height."""
    tensors = tuple(_as_tensor(p) for p in parts)
    if len(tensors) < 1:
        raise ShapeMismatch("concat_cols: no inputs")
    _check_finite("concat_cols", *tensors)
    height = None
    for t in tensors:
        if t.data.ndim != 2:
            raise ShapeMismatch(f"concat_cols: expected matrices, got shape {t.shape}")
        if height is None:
            height = t.shape[0]
        elif t.shape[0] != height:
            raise ShapeMismatch(f"concat_cols: heights differ ({height} vs {t.shape[0]})")
    out = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] if t.requires_grad else None
                     for i, t in enumerate(tensors))

    return _record("concat_cols", tensors, out, vjp)


def mean_rows(a) -> Tensor:
    """Average the rows of a matrix into a single (1, d) row."""
    a = _as_tensor(a)
    _check_finite("mean_rows", a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"mean_rows: expected a matrix, got shape {a.shape}")
    n = a.shape[0]
    out = a.data.mean(axis=0, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record("mean_rows", (a,), out, vjp)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite("sum_all", a)
    out = np.asarray(a.data.sum())

    def vjp(g):
        return (np.full(a.shape, float(g)),)

    return _record("sum_all", (a,), out, vjp)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite("sigmoid", a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (a,), out, vjp)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite("relu", a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _record("relu", (a,), out, vjp)


def hinge(a) -> Tensor:
    """max(0, x), the one-sided penalty used by the matching loss."""
    return relu(a)


def gelu(a) -> Tensor:
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    a = _as_tensor(a)
    _check_finite("gelu", a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def vjp(g):
        return (g * (phi + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI),)

    return _record("gelu", (a,), out, vjp)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite("tanh", a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", (a,), out, vjp)


def softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite("softmax_rows", a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"softmax_rows: expected a matrix, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return _record("softmax_rows", (a,), out, vjp)


def l2norm_rows(a) -> Tensor:
    """Per-row Euclidean norm of a matrix, returned as an (n, 1) column."""
    a = _as_tensor(a)
    _check_finite("l2norm_rows", a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"l2norm_rows: expected a matrix, got shape {a.shape}")
    out = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))

    def vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (g * np.where(out > 0.0, a.data / safe, 0.0),)

    return _record("l2norm_rows", (a,), out, vjp)


def square(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite("square", a)
    out = a.data * a.data

    def vjp(g):
        return (2.0 * g * a.data,)

    return _record("square", (a,), out, vjp)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    _check_finite("clamp", a)
    if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
        raise ShapeMismatch(f"clamp: invalid bounds [{lo}, {hi}]")
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def vjp(g):
        return (g * inside,)

    return _record("clamp", (a,), out, vjp)


def log(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite("log", a)
    if np.any(a.data <= 0.0):
        raise NonFiniteValue("log: non-positive input")
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _record("log", (a,), out, vjp)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with learned (1, d) gain and bias."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    _check_finite("layer_norm", a, gain, bias)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"layer_norm: expected a matrix, got shape {a.shape}")
    d = a.shape[1]
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise ShapeMismatch(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    mu = a.data.mean(axis=1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = centered / std
    out = xhat * gain.data + bias.data

    def vjp(g):
        g_gain = (g * xhat).sum(axis=0, keepdims=True) if gain.requires_grad else None
        g_bias = g.sum(axis=0, keepdims=True) if bias.requires_grad else None
        if a.requires_grad:
            gx = g * gain.data
            g_a = (gx - gx.mean(axis=1, keepdims=True)
                   - xhat * (gx * xhat).mean(axis=1, keepdims=True)) / std
        else:
            g_a = None
        return g_a, g_gain, g_bias

    return _record("layer_norm", (a, gain, bias), out, vjp)


def scale_rows(a, s) -> Tensor:
    """Multiply row j of a matrix by scalar s_j; s is (n,) or (n, 1)."""
    a, s = _as_tensor(a), _as_tensor(s)
    _check_finite("scale_rows", a, s)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"scale_rows: expected a matrix, got shape {a.shape}")
    if s.shape not in ((a.shape[0],), (a.shape[0], 1)):
        raise ShapeMismatch(f"scale_rows: {s.shape} scales do not match {a.shape[0]} rows")
    col = s.data.reshape(a.shape[0], 1)
    out = a.data * col

    def vjp(g):
        g_a = g * col if a.requires_grad else None
        g_s = (g * a.data).sum(axis=1).reshape(s.shape) if s.requires_grad else None
        return g_a, g_s

    return _record("scale_rows", (a, s), out, vjp)


def cosine_similarity_matrix(a, b, eps: float = 1e-8) -> Tensor:
    """All-pairs cosine similarity between the rows of two matrices.

    Entry (i, j) is a_i.b_j / max(|a_i| * |b_j|, eps); the eps guard keeps
    zero rows well-defined (similarity 0) at the price of a kink when the
    norm product crosses eps.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("cosine_similarity_matrix", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(
            f"cosine_similarity_matrix: shapes {a.shape} and {b.shape} do not conform")
    if eps <= 0.0:
        raise ShapeMismatch("cosine_similarity_matrix: eps must be positive")
    na = np.sqrt((a.data * a.data).sum(axis=1))  # (m,)
    nb = np.sqrt((b.data * b.data).sum(axis=1))  # (n,)
    prod = np.outer(na, nb)
    denom = np.maximum(prod, eps)
    dots = a.data @ b.data.T
    out = dots / denom

    def vjp(g):
        active = prod > eps  # where the norm product, not eps, is the divisor
        w1 = g / denom
        w2 = np.where(active, g * dots / (denom * denom), 0.0)
        g_a = None
        if a.requires_grad:
            row = (w2 * nb[None, :]).sum(axis=1)
            safe_na = np.where(na > 0.0, na, 1.0)
            g_a = w1 @ b.data - (row / safe_na)[:, None] * a.data
        g_b = None
        if b.requires_grad:
            col = (w2 * na[:, None]).sum(axis=0)
            safe_nb = np.where(nb > 0.0, nb, 1.0)
            g_b = w1.T @ a.data - (col / safe_nb)[:, None] * b.data
        return g_a, g_b

    return _record("cosine_similarity_matrix", (a, b), out, vjp)


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------

def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            h: float = 1e-5,
                            coords: Sequence[int] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must map a tensor to a scalar tensor deterministically. The error per
    coordinate is |analytic - central| / max(1, |central|); coords selects a
    subset of flat coordinates to probe (default: all of them).
    """
    if not (1e-7 <= h <= 1e-3):
        raise ValueError(f"finite_difference_check: h={h} outside [1e-7, 1e-3]")
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    with fresh_tape():
        out = f(probe)
        if out.data.size != 1:
            raise TapeError("finite_difference_check: f must return a scalar")
        backward(out)
    analytic = probe.grad.reshape(-1)

    if coords is None:
        coords = range(base.size)
    flat = base.reshape(-1)
    worst = 0.0
    with no_grad():
        for idx in coords:
            original = flat[idx]
            try:
                flat[idx] = original + h
                f_plus = f(Tensor(base.copy())).item()
                flat[idx] = original - h
                f_minus = f(Tensor(base.copy())).item()
            except NonFiniteValue as exc:
                raise NonFiniteValue(
                    f"finite_difference_check: non-finite intermediate at coordinate {idx}"
                ) from exc
            finally:
                flat[idx] = original
            central = (f_plus - f_minus) / (2.0 * h)
            if not math.isfinite(central):
                raise NonFiniteValue(
                    f"finite_difference_check: non-finite difference at coordinate {idx}")
            err = abs(analytic[idx] - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    return worst
