"""Small reverse-mode differentiation core used by the model.

Tensors hold float64 numpy arrays. Operations record themselves onto the
active :class:`Tape` (entered with ``with Tape() as tape:``) whenever one of
their inputs requires a gradient; outside a tape they are plain numpy calls,
which is what evaluation uses.

The primitive set is deliberately closed: matmul, spmm, elementwise
add/sub/mul, sigmoid, log, log-sigmoid, square, sum/mean, concatenation,
row slicing/gathering, segment sums and segment softmax.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ContractError(ValueError):
    """An argument violates an operation's shape or value contract."""


class NonFiniteError(ArithmeticError):
    """A loss or gradient evaluated to NaN or infinity."""


_local = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._is_leaf = True

    @classmethod
    def _result(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._is_leaf = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Op:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive operations.

    Operations are appended as they execute, so the list is already in
    topological order.
    """

    ops: list[Op] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        self._previous = active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._previous

    def __len__(self) -> int:
        return len(self.ops)


def _record(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor._result(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.ops.append(Op(name, inputs, out, grad_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` slot of every leaf on the tape."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for op in reversed(tape.ops):
        g = op.output.grad
        if g is None:
            continue
        for t, gi in zip(op.inputs, op.grad_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(gi, dtype=np.float64)
            else:
                t.grad = t.grad + gi
        if not op.output._is_leaf:
            op.output.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without underflow for large negative inputs."""
    y = -np.logaddexp(0.0, -x.data)
    return _record("log_sigmoid", y, (x,),
                   lambda g: (g * (1.0 - _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)),))


def square(x: Tensor) -> Tensor:
    return _record("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# -- reductions --------------------------------------------------------------

def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    y = x.data.sum(axis=axis)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record("sum", np.asarray(y, dtype=np.float64), (x,), grad_fn)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner products of two equally shaped matrices."""
    if a.shape != b.shape:
        raise ContractError(f"row_dot: shapes {a.shape} and {b.shape} differ")
    return sum(mul(a, b), axis=1)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Dense product for 2-D @ 2-D and 2-D @ 1-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def grad_fn(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", a.data @ b.data, (a, b), grad_fn)


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Compressed sparse row matrix with validated structure."""

    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if indptr.shape != (self.rows + 1,) or indptr[0] != 0 or np.any(np.diff(indptr) < 0):
            raise ContractError("row offsets must be non-decreasing, start at 0 and have length rows+1")
        if indptr[-1] != len(indices) or len(indices) != len(values):
            raise ContractError("nonzero count does not match the last row offset")
        if len(indices) and (indices.min() < 0 or indices.max() >= self.cols):
            raise ContractError("column index out of range")
        row_of = np.repeat(np.arange(self.rows), np.diff(indptr))
        same_row = row_of[1:] == row_of[:-1]
        if np.any(np.diff(indices)[same_row] <= 0):
            raise ContractError("column indices must be strictly increasing within a row")
        for name, arr in (("indptr", indptr), ("indices", indices), ("values", values)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_csr", sp.csr_matrix((values, indices, indptr), shape=self.shape))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        m = sp.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def from_coo(cls, rows, cols, values, shape) -> "SparseMatrix":
        return cls.from_scipy(sp.coo_matrix((values, (rows, cols)), shape=shape))

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        return cls.from_scipy(sp.csr_matrix(np.asarray(dense, dtype=np.float64)))

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls.from_scipy(sp.identity(n, format="csr"))

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix.from_scipy(self._csr.T)

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.rows), np.diff(self.indptr))


def spmm(s: SparseMatrix, d: Tensor, weights: Tensor | None = None) -> Tensor:
    """Sparse @ dense. ``weights`` optionally replaces the stored nonzeros with a
    learnable vector (same order as ``s.values``)."""
    d = as_tensor(d)
    if d.ndim not in (1, 2) or d.shape[0] != s.cols:
        raise ContractError(f"spmm: sparse {s.shape} cannot multiply dense {d.shape}")
    if weights is None:
        m = s.to_scipy()
        return _record("spmm", np.asarray(m @ d.data), (d,), lambda g: (np.asarray(m.T @ g),))
    if weights.shape != (s.nnz,):
        raise ContractError(f"spmm: expected {s.nnz} weights, got shape {weights.shape}")
    m = sp.csr_matrix((weights.data, s.indices, s.indptr), shape=s.shape)
    rows, cols = s.row_ids(), s.indices

    def grad_fn(g):
        gd = np.asarray(m.T @ g)
        if d.ndim == 1:
            gw = g[rows] * d.data[cols]
        else:
            gw = np.einsum("ij,ij->i", g[rows], d.data[cols])
        return gd, gw

    return _record("spmm", np.asarray(m @ d.data), (d, weights), grad_fn)


# -- structural --------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ContractError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _record("concat", data, tensors, grad_fn)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.shape[0]:
        raise ContractError(f"slice_rows: [{start}, {stop}) outside {x.shape[0]} rows")

    def grad_fn(g):
        out = np.zeros_like(x.data)
        out[start:stop] = g
        return (out,)

    return _record("slice_rows", x.data[start:stop].copy(), (x,), grad_fn)


def gather(x: Tensor, index) -> Tensor:
    """Rows ``x[index]``; repeated indices accumulate in the backward pass."""
    index = np.asarray(index, dtype=np.int64)

    def grad_fn(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _record("gather", x.data[index], (x,), grad_fn)


def _segment_matrix(segments: np.ndarray, n_segments: int) -> sp.csr_matrix:
    n = len(segments)
    return sp.csr_matrix((np.ones(n), (segments, np.arange(n))), shape=(n_segments, n))


def segment_sum(x: Tensor, segments, n_segments: int) -> Tensor:
    """Sum the rows of ``x`` that share a segment id."""
    segments = np.asarray(segments, dtype=np.int64)
    if len(segments) != x.shape[0]:
        raise ContractError("segment_sum: one segment id per row required")
    if len(segments) and (segments.min() < 0 or segments.max() >= n_segments):
        raise ContractError("segment_sum: segment id out of range")
    m = _segment_matrix(segments, n_segments)
    return _record("segment_sum", np.asarray(m @ x.data), (x,), lambda g: (g[segments],))


def segment_softmax(logits: Tensor, segments, n_segments: int) -> Tensor:
    """Softmax of a 1-D logit vector within each segment (max-shifted)."""
    segments = np.asarray(segments, dtype=np.int64)
    if logits.ndim != 1 or len(segments) != len(logits.data):
        raise ContractError("segment_softmax: need a 1-D logit vector and one segment id per entry")
    z = logits.data
    peak = np.full(n_segments, -np.inf)
    np.maximum.at(peak, segments, z)
    e = np.exp(z - peak[segments])
    denom = np.bincount(segments, weights=e, minlength=n_segments)
    y = e / denom[segments]

    def grad_fn(g):
        dot = np.bincount(segments, weights=g * y, minlength=n_segments)
        return (y * (g - dot[segments]),)

    return _record("segment_softmax", y, (logits,), grad_fn)


def softmax(logits: Tensor) -> Tensor:
    return segment_softmax(logits, np.zeros(len(logits.data), dtype=np.int64), 1)


def row_scale(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row r of ``x`` by scalar ``w[r]``."""
    if w.ndim != 1 or x.ndim != 2 or w.shape[0] != x.shape[0]:
        raise ContractError(f"row_scale: {x.shape} rows vs weights {w.shape}")
    return _record("row_scale", x.data * w.data[:, None], (x, w),
                   lambda g: (g * w.data[:, None], np.einsum("ij,ij->i", g, x.data)))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the identity when ``rate`` is 0."""
    if rate <= 0.0:
        return x
    if not rate < 1.0:
        raise ContractError("dropout rate must be in [0, 1)")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(mask))


# -- checking ----------------------------------------------------------------

def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    n_samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` recomputes the scalar loss from the current parameter values. When
    ``n_samples`` is given, that many coordinates are checked per tensor.
    """
    if not h > 0:
        raise ContractError("finite difference step must be positive")
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if n_samples is not None and n_samples < flat.size:
            coords = rng.choice(flat.size, size=n_samples, replace=False)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + h
            up = float(f().data)
            flat[k] = orig - h
            down = float(f().data)
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError("loss became non-finite during finite differencing")
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[k]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# -- optimisation ------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if len(grads) != len(self.params):
            raise ContractError("one gradient per parameter required")
        for p, g in zip(self.params, grads):
            if np.shape(g) != p.shape:
                raise ContractError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
