"""float64 tensors with an explicit reverse-mode gradient tape.

Storage is flat row-major numpy with explicit shapes. The op set is exactly
what the sequence models downstream need: matmul (optionally batched over a
leading axis), suffix-broadcast add, elementwise mul, relu, softmax and
log-softmax, layer norm, embedding gather, reshape / transpose, scalar
reduction, dropout. Gradients are produced by replaying a GradTape in
reverse recording order.

Log-domain code represents probability zero as -inf. That sentinel is legal
for ``log_sum_exp``, which is a plain float utility, not a taped op. Taped
forward ops on finite inputs must produce finite outputs; a NaN or Inf there
raises NumericError.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

NEG_INF = float("-inf")


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """A forward operation produced NaN or Inf from finite inputs."""


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.data = np.ascontiguousarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


BackwardRule = Callable[[np.ndarray], None]

_TAPES: list["GradTape"] = []


class GradTape:
    """Recorded forward operations, replayed in reverse for backprop.

    One tape is single-threaded; run independent tapes for parallel work.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, BackwardRule]] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPES.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)=1 and accumulate grads into every reachable tensor."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, rule in reversed(self._records):
            if out.grad is None:
                continue
            rule(out.grad)


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution to ``t`` (no-op unless it requires grad)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def custom_op(values, inputs: Sequence[Tensor], rule: BackwardRule, check_finite: bool = True) -> Tensor:
    """Wrap externally computed forward values as a taped operation.

    ``rule`` receives the output gradient and must call ``accumulate_grad``
    on the inputs itself. ``check_finite=False`` admits +inf sentinels, e.g.
    an infeasible lattice loss.
    """
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if check_finite and not np.isfinite(arr).all():
        raise NumericError("custom_op produced non-finite values")
    return _emit(arr, inputs, rule)


def _emit(arr: np.ndarray, inputs: Sequence[Tensor], rule: BackwardRule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if _TAPES and out.requires_grad:
        _TAPES[-1]._records.append((out, rule))
    return out


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")
    return arr


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; ``b`` may be a suffix shape of ``a`` (bias, mask)."""
    if a.shape != b.shape:
        if b.data.ndim > a.data.ndim or a.shape[a.data.ndim - b.data.ndim:] != b.shape:
            raise ShapeError(f"add: shape {b.shape} is not a suffix of {a.shape}")
    lead = a.data.ndim - b.data.ndim

    def rule(g: np.ndarray) -> None:
        accumulate_grad(a, g)
        accumulate_grad(b, g.sum(axis=tuple(range(lead))) if lead else g)

    return _emit(_finite(a.data + b.data, "add"), (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def rule(g: np.ndarray) -> None:
        accumulate_grad(a, g * b.data)
        accumulate_grad(b, g * a.data)

    return _emit(_finite(a.data * b.data, "mul"), (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    def rule(g: np.ndarray) -> None:
        accumulate_grad(a, g * c)

    return _emit(_finite(a.data * c, "scale"), (a,), rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 3-D operands batch over the leading axis."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def rule(g: np.ndarray) -> None:
        accumulate_grad(a, g @ b.data.swapaxes(-1, -2))
        accumulate_grad(b, a.data.swapaxes(-1, -2) @ g)

    return _emit(_finite(a.data @ b.data, "matmul"), (a, b), rule)


def relu(a: Tensor) -> Tensor:
    def rule(g: np.ndarray) -> None:
        accumulate_grad(a, g * (a.data > 0.0))

    return _emit(np.maximum(a.data, 0.0), (a,), rule)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; every slice along ``axis`` sums to 1."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def rule(g: np.ndarray) -> None:
        accumulate_grad(a, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _emit(_finite(p, "softmax"), (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def rule(g: np.ndarray) -> None:
        accumulate_grad(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _emit(_finite(out, "log_softmax"), (a,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-vector normalization over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def rule(g: np.ndarray) -> None:
        dxhat = g * gain.data
        accumulate_grad(
            x,
            inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)),
        )
        lead = tuple(range(g.ndim - 1))
        accumulate_grad(gain, (g * xhat).sum(axis=lead) if lead else g * xhat)
        accumulate_grad(bias, g.sum(axis=lead) if lead else g)

    return _emit(_finite(out, "layer_norm"), (x, gain, bias), rule)


def embed(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of an embedding table; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embed: ids must be 1-D, got shape {idx.shape}")

    def rule(g: np.ndarray) -> None:
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _emit(np.ascontiguousarray(table.data[idx]), (table,), rule)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}")

    def rule(g: np.ndarray) -> None:
        accumulate_grad(a, g.reshape(a.shape))

    return _emit(a.data.reshape(shape), (a,), rule)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))

    def rule(g: np.ndarray) -> None:
        accumulate_grad(a, g.transpose(inv))

    return _emit(a.data.transpose(axes), (a,), rule)


def take_per_row(a: Tensor, cols: Sequence[int]) -> Tensor:
    """out[i] = a[i, cols[i]] for a 2-D tensor."""
    idx = np.asarray(cols, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"take_per_row: need 2-D input and one column per row, got {a.shape} and {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ShapeError(f"take_per_row: column ids outside 0..{a.shape[1] - 1}")
    rows = np.arange(a.shape[0])

    def rule(g: np.ndarray) -> None:
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, (rows, idx), g)

    return _emit(np.ascontiguousarray(a.data[rows, idx]), (a,), rule)


def sum_all(a: Tensor) -> Tensor:
    def rule(g: np.ndarray) -> None:
        accumulate_grad(a, np.broadcast_to(g, a.shape))

    return _emit(np.asarray(a.data.sum()), (a,), rule)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate <= 0."""
    if rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ShapeError(f"dropout: rate must be < 1, got {rate}")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def rule(g: np.ndarray) -> None:
        accumulate_grad(a, g * mask)

    return _emit(a.data * mask, (a,), rule)


def log_sum_exp(xs: Iterable[float] | np.ndarray) -> float:
    """log(sum(exp(xs))) with max shift; empty input yields -inf.

    -inf entries are absorbing-zero sentinels and drop out exactly.
    """
    arr = xs if isinstance(xs, np.ndarray) else np.asarray(list(xs), dtype=np.float64)
    if arr.size == 0:
        return NEG_INF
    m = float(arr.max())
    if m == NEG_INF:
        return NEG_INF
    if math.isinf(m):
        raise NumericError("log_sum_exp: +inf input")
    return m + math.log(float(np.exp(arr - m).sum()))
