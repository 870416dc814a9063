"""Dense 2-D float64 tensors and a record-replay reverse-mode gradient tape.

Every value is a 2-D matrix: vectors are 1 x n rows, scalars are 1 x 1.
Operations run in plain numpy when no tape is active; under an active
``Tape`` each primitive appends an adjoint closure, and ``backward`` replays
the closures in exact reverse order of recording, accumulating gradients on
leaf tensors created with ``requires_grad=True``.

Tensor data is frozen (numpy writeable flag off) once constructed; parameter
updates go through ``Tensor.assign`` which rebinds to a fresh array.
"""

from __future__ import annotations

from typing import Callable, Iterable, Literal, Sequence

import numpy as np

from .errors import ContractError, NumericError, TapeError

NormMode = Literal["softmax", "sparsemax"]

_NORM_MODES = ("softmax", "sparsemax")


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


class Tape:
    """Ordered record of primitive ops, replayed strictly in reverse.

    Use as a context manager around the forward computation:

        with Tape() as tape:
            loss = ...
        backward(loss)
    """

    _stack: list["Tape"] = []

    def __init__(self) -> None:
        # each record is (output tensor, adjoint closure)
        self._records: list[tuple["Tensor", Callable]] = []
        self._watched: dict[int, "Tensor"] = {}

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = Tape._stack.pop()
        if popped is not self:
            raise TapeError("tape context exited out of order")
        return False

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None

    def _watch(self, t: "Tensor") -> None:
        if t.requires_grad:
            self._watched.setdefault(id(t), t)

    def _record(self, out: "Tensor", adjoint: Callable) -> None:
        self._records.append((out, adjoint))

    def __len__(self) -> int:
        return len(self._records)

    def clear(self) -> None:
        """Drop all records; a subsequent backward accumulates nothing."""
        self._records.clear()
        self._watched.clear()


class Tensor:
    """Immutable 2-D float64 matrix, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.atleast_2d(np.array(data, dtype=np.float64, order="C"))
        if arr.ndim != 2:
            raise ContractError(f"tensor data must be at most 2-D, got ndim={arr.ndim}")
        _check_finite(arr, "tensor construction")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _from_owned(cls, arr: np.ndarray) -> "Tensor":
        # internal: wrap a freshly allocated array without copying
        out = object.__new__(cls)
        arr.setflags(write=False)
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._tape = None
        return out

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor._from_owned(self.data.copy())

    def assign(self, data) -> None:
        """Rebind to new values of the same shape (used by optimizers)."""
        arr = np.atleast_2d(np.array(data, dtype=np.float64, order="C"))
        if arr.shape != self.data.shape:
            raise ContractError(f"assign shape {arr.shape} != {self.data.shape}")
        _check_finite(arr, "assign")
        arr.setflags(write=False)
        self.data = arr

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all defer to the module-level primitives
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    @property
    def T(self):
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _live(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape


def _finish(out_data: np.ndarray, op: str, inputs: tuple[Tensor, ...],
            adjoint: Callable | None) -> Tensor:
    """Wrap an op result, validating finiteness and recording the adjoint."""
    _check_finite(out_data, op)
    out = Tensor._from_owned(out_data)
    tape = Tape.active()
    if tape is not None and adjoint is not None and any(_live(t, tape) for t in inputs):
        for t in inputs:
            tape._watch(t)
        out._tape = tape
        tape._record(out, adjoint)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcastable(a: tuple[int, int], b: tuple[int, int], op: str) -> None:
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise ContractError(f"{op}: shapes {a} and {b} do not broadcast")


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.cols != b.rows:
        raise ContractError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def adjoint(g, acc):
        acc(a, g @ b.data.T)
        acc(b, a.data.T @ g)

    return _finish(out_data, "matmul", (a, b), adjoint)


def transpose(a: Tensor) -> Tensor:
    a = _wrap(a)
    out_data = np.ascontiguousarray(a.data.T)

    def adjoint(g, acc):
        acc(a, g.T)

    return _finish(out_data, "transpose", (a,), adjoint)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcastable(a.shape, b.shape, "add")
    out_data = a.data + b.data

    def adjoint(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(g, b.shape))

    return _finish(out_data, "add", (a, b), adjoint)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcastable(a.shape, b.shape, "sub")
    out_data = a.data - b.data

    def adjoint(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(-g, b.shape))

    return _finish(out_data, "sub", (a, b), adjoint)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcastable(a.shape, b.shape, "mul")
    out_data = a.data * b.data

    def adjoint(g, acc):
        acc(a, _unbroadcast(g * b.data, a.shape))
        acc(b, _unbroadcast(g * a.data, b.shape))

    return _finish(out_data, "mul", (a, b), adjoint)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcastable(a.shape, b.shape, "div")
    with np.errstate(divide="raise", invalid="raise"):
        try:
            out_data = a.data / b.data
        except FloatingPointError as err:
            raise NumericError(f"div hit a zero or invalid denominator: {err}") from None

    def adjoint(g, acc):
        acc(a, _unbroadcast(g / b.data, a.shape))
        acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _finish(out_data, "div", (a, b), adjoint)


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    out_data = np.maximum(x.data, 0.0)
    mask = x.data > 0.0  # subgradient at exactly 0 is 0

    def adjoint(g, acc):
        acc(x, g * mask)

    return _finish(out_data, "relu", (x,), adjoint)


def exp(x: Tensor) -> Tensor:
    x = _wrap(x)
    with np.errstate(over="ignore"):  # overflow surfaces as NumericError below
        out_data = np.exp(x.data)

    def adjoint(g, acc):
        acc(x, g * out_data)

    return _finish(out_data, "exp", (x,), adjoint)


def log(x: Tensor) -> Tensor:
    x = _wrap(x)
    if (x.data <= 0.0).any():
        raise NumericError("log of a non-positive value")
    out_data = np.log(x.data)

    def adjoint(g, acc):
        acc(x, g / x.data)

    return _finish(out_data, "log", (x,), adjoint)


def sqrt(x: Tensor) -> Tensor:
    x = _wrap(x)
    if (x.data < 0.0).any():
        raise NumericError("sqrt of a negative value")
    out_data = np.sqrt(x.data)

    def adjoint(g, acc):
        acc(x, g * (0.5 / out_data))

    return _finish(out_data, "sqrt", (x,), adjoint)


def sum_entries(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum along an axis (or both), keeping the 2-D shape."""
    x = _wrap(x)
    if axis not in (None, 0, 1):
        raise ContractError(f"sum axis must be None, 0 or 1, got {axis!r}")
    if axis is None:
        out_data = x.data.sum().reshape(1, 1)
    else:
        out_data = x.data.sum(axis=axis, keepdims=True)

    def adjoint(g, acc):
        acc(x, np.broadcast_to(g, x.shape))

    return _finish(out_data, "sum", (x,), adjoint)


def mean_rows(x: Tensor) -> Tensor:
    """Arithmetic mean over rows; returns a 1 x cols tensor."""
    x = _wrap(x)
    if x.rows < 1:
        raise ContractError("mean_rows requires at least one row")
    n = x.rows
    out_data = x.data.mean(axis=0, keepdims=True)

    def adjoint(g, acc):
        acc(x, np.broadcast_to(g / n, x.shape))

    return _finish(out_data, "mean_rows", (x,), adjoint)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ContractError("concat_cols needs at least one tensor")
    rows = parts[0].rows
    if any(p.rows != rows for p in parts):
        raise ContractError("concat_cols: row counts differ")
    out_data = np.hstack([p.data for p in parts])
    widths = [p.cols for p in parts]

    def adjoint(g, acc):
        off = 0
        for p, w in zip(parts, widths):
            acc(p, g[:, off:off + w])
            off += w

    return _finish(out_data, "concat_cols", tuple(parts), adjoint)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ContractError("concat_rows needs at least one tensor")
    cols = parts[0].cols
    if any(p.cols != cols for p in parts):
        raise ContractError("concat_rows: column counts differ")
    out_data = np.vstack([p.data for p in parts])
    heights = [p.rows for p in parts]

    def adjoint(g, acc):
        off = 0
        for p, h in zip(parts, heights):
            acc(p, g[off:off + h, :])
            off += h

    return _finish(out_data, "concat_rows", tuple(parts), adjoint)


# ---------------------------------------------------------------------------
# simplex row normalization


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def sparsemax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean projection onto the probability simplex.

    For each row z with coordinates sorted descending as z_(1) >= ... >= z_(K),
    the support size is the largest k with 1 + k * z_(k) > sum_{j<=k} z_(j);
    the threshold is tau = (sum over the support - 1) / k, and the output is
    max(z - tau, 0). Entries outside the support are exactly 0.0.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n, k_dim = z.shape
    u = -np.sort(-z, axis=1)  # descending, stable enough: values only
    cssv = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, k_dim + 1, dtype=np.float64)
    k = np.count_nonzero(u - cssv / ind > 0.0, axis=1)
    tau = cssv[np.arange(n), k - 1] / k
    return np.maximum(z - tau[:, None], 0.0)


def row_normalize(scores: Tensor, mode: NormMode) -> Tensor:
    """Map each row onto the probability simplex (softmax or sparsemax)."""
    scores = _wrap(scores)
    if mode not in _NORM_MODES:
        raise ContractError(f"unknown normalization mode {mode!r}")
    if mode == "softmax":
        p = softmax_rows(scores.data)

        def adjoint(g, acc):
            inner = (g * p).sum(axis=1, keepdims=True)
            acc(scores, p * (g - inner))

    else:
        p = sparsemax_rows(scores.data)
        support = p > 0.0

        def adjoint(g, acc):
            # v -> 1_S * (v - mean_S(v)) with S the forward-pass support
            cnt = support.sum(axis=1, keepdims=True)
            mean_s = (g * support).sum(axis=1, keepdims=True) / cnt
            acc(scores, np.where(support, g - mean_s, 0.0))

    return _finish(p, f"row_normalize[{mode}]", (scores,), adjoint)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(p) into ``p.grad`` for every watched parameter.

    ``loss`` must be a 1x1 tensor produced while a tape was active. Replays
    the producing tape's records in exact reverse order; gradients add onto
    any existing ``.grad`` values.
    """
    if not isinstance(loss, Tensor):
        raise TapeError("backward expects a Tensor")
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 scalar, got {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("value was not produced under an active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}

    def acc(t: Tensor, contribution: np.ndarray) -> None:
        if not _live(t, tape):
            return
        prev = grads.get(id(t))
        grads[id(t)] = contribution if prev is None else prev + contribution

    for out, adjoint in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue  # op not on the path to loss
        adjoint(g, acc)

    for t in tape._watched.values():
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        else:
            g = np.array(g)  # own the memory; views of tape arrays may linger
        t.grad = g if t.grad is None else t.grad + g
