"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Only the handful of primitives the matching pipeline needs are provided.
Every primitive records a backward closure on the active
:class:`ComputationRecord`; :func:`backward` replays the record in reverse
order and accumulates into :class:`Parameter` gradients.

    >>> w = Parameter(np.ones((2, 2)), name="w")
    >>> with ComputationRecord():
    ...     loss = frobenius_sq(matmul(w, constant(np.eye(2))))
    ...     backward(loss)
    >>> w.grad
    array([[2., 2.],
           [2., 2.]])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "SingularMatrixError",
    "NonFiniteError",
    "Tensor",
    "Parameter",
    "ComputationRecord",
    "constant",
    "current_record",
    "matmul",
    "dense",
    "add",
    "subtract",
    "multiply",
    "scale",
    "relu",
    "sigmoid",
    "concat",
    "max_pool_over_points",
    "frobenius_sq",
    "mse",
    "tensor_sum",
    "transpose",
    "reshape",
    "columns",
    "Gather",
    "take",
    "gather_sum",
    "Segments",
    "segment_mean",
    "inverse",
    "right_pseudo_inverse",
    "backward",
    "gradient_check",
]


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeError(AutodiffError, ValueError):
    pass


class SingularMatrixError(AutodiffError, np.linalg.LinAlgError):
    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_record() -> "ComputationRecord | None":
    """Innermost active record on this thread, or None."""
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense array participating (optionally) in a recorded computation."""

    __slots__ = ("data", "requires_grad", "node_id", "record")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.record: ComputationRecord | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        return self.data.ravel().tolist()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """Learnable leaf tensor with an accumulated gradient."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


_BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ComputationRecord:
    """Ordered log of primitive operations for one forward pass.

    Records are thread-confined. Use as a context manager to make the record
    active on the current thread; primitives only record while a record is
    active and at least one input requires a gradient.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], _BackwardFn]] = []

    def __enter__(self) -> "ComputationRecord":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise AutodiffError("computation records exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, out: Tensor, inputs: tuple[Tensor, ...], fn: _BackwardFn) -> None:
        out.node_id = len(self.entries)
        out.record = self
        self.entries.append((out, inputs, fn))

    def gradients(self, loss: Tensor) -> dict[int, tuple[Parameter, np.ndarray]]:
        """Return ``{id(param): (param, dloss/dparam)}`` without touching ``param.grad``."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        out: dict[int, tuple[Parameter, np.ndarray]] = {}
        if isinstance(loss, Parameter):
            out[id(loss)] = (loss, np.ones_like(loss.data))
            return out
        if loss.record is not self:
            # constant loss: nothing reachable
            return out
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node, inputs, fn in reversed(self.entries[: loss.node_id + 1]):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if isinstance(inp, Parameter):
                    if key in out:
                        out[key] = (inp, out[key][1] + gi)
                    else:
                        out[key] = (inp, np.array(gi, dtype=np.float64))
                elif key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return out


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], fn: _BackwardFn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    rec = current_record()
    if needs and rec is not None:
        rec.push(out, inputs, fn)
    else:
        out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- primitives -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data
    return _record(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def dense(w, x, b=None, extra=None, activation: str | None = None) -> Tensor:
    """Fused layer ``act(W x + b + extra)`` with ``b`` a column broadcast over ``x``.

    ``activation`` is ``None`` or ``"relu"``. Equivalent to composing
    :func:`matmul`, :func:`add` and :func:`relu`, with fewer passes.
    """
    w, x = constant(w), constant(x)
    if w.data.ndim != 2 or x.data.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"dense shape mismatch: {w.shape} x {x.shape}")
    inputs = [w, x]
    z = w.data @ x.data
    if b is not None:
        b = constant(b)
        if b.shape != (z.shape[0], 1):
            raise ShapeError(f"dense bias must be {(z.shape[0], 1)}, got {b.shape}")
        z += b.data
        inputs.append(b)
    if extra is not None:
        extra = constant(extra)
        if extra.shape != z.shape:
            raise ShapeError(f"dense addend must be {z.shape}, got {extra.shape}")
        z += extra.data
        inputs.append(extra)
    if activation == "relu":
        mask = z > 0
        np.multiply(z, mask, out=z)
    elif activation is not None:
        raise ValueError(f"unknown activation {activation!r}")
    W, X = w.data, x.data
    has_b, has_extra = b is not None, extra is not None

    def fn(g):
        if activation == "relu":
            g = g * mask
        out = [g @ X.T, W.T @ g]
        if has_b:
            out.append(g.sum(axis=1, keepdims=True))
        if has_extra:
            out.append(g)
        return out

    return _record(z, tuple(inputs), fn)


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def subtract(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"subtract shape mismatch: {a.shape} - {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def multiply(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"multiply shape mismatch: {a.shape} * {b.shape}") from None
    A, B = a.data, b.data
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape))
    )


def scale(a, c: float) -> Tensor:
    a = constant(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = constant(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = constant(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(constant(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of an empty tensor list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = [t.shape for t in ts]
        raise ShapeError(f"concat shape mismatch along axis {axis}: {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def max_pool_over_points(a) -> Tensor:
    """Row-wise max of an ``f x m`` feature matrix; ties route to the lowest column."""
    a = constant(a)
    if a.data.ndim != 2:
        raise ShapeError(f"max pool expects f x m, got {a.shape}")
    if a.shape[1] == 0:
        raise ShapeError("max pool over an empty point set")
    idx = np.argmax(a.data, axis=1)
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx][:, None]
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        full[rows, idx] = g[:, 0]
        return (full,)

    return _record(out, (a,), fn)


def _check_finite(value: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{what} produced a non-finite value")


def frobenius_sq(a) -> Tensor:
    a = constant(a)
    A = a.data
    out = np.array(np.sum(A * A))
    _check_finite(out, "frobenius_sq")
    return _record(out, (a,), lambda g: (2.0 * g * A,))


def mse(a, b) -> Tensor:
    """Mean of entrywise squared differences."""
    a, b = constant(a), constant(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.array(np.sum(diff * diff) / n)
    _check_finite(out, "mse")
    return _record(out, (a, b), lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


def tensor_sum(a) -> Tensor:
    a = constant(a)
    out = np.array(np.sum(a.data))
    _check_finite(out, "sum")
    shape = a.shape
    return _record(out, (a,), lambda g: (np.broadcast_to(g, shape),))


def transpose(a) -> Tensor:
    a = constant(a)
    return _record(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    """Row-major reshape."""
    a = constant(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {shape}") from None
    return _record(out, (a,), lambda g: (g.reshape(old),))


def columns(a, start: int, stop: int) -> Tensor:
    """Contiguous column slice ``a[:, start:stop]``."""
    a = constant(a)
    if a.data.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise ShapeError(f"column slice {start}:{stop} invalid for shape {a.shape}")
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record(a.data[:, start:stop], (a,), fn)


class Gather:
    """Reusable index gather; caches the sort needed to scatter gradients back."""

    __slots__ = ("index", "size", "_plan")

    def __init__(self, index, size: int):
        self.index = np.asarray(index, dtype=np.intp).reshape(-1)
        self.size = int(size)
        if self.index.size and (self.index.min() < 0 or self.index.max() >= self.size):
            raise ShapeError(f"gather index out of range for axis of size {self.size}")
        self._plan = None

    def scatter_columns(self, g: np.ndarray) -> np.ndarray:
        """Sum the columns of ``g`` (f x len(index)) into an f x size array."""
        if self._plan is None:
            order = np.argsort(self.index, kind="stable")
            targets, starts = np.unique(self.index[order], return_index=True)
            self._plan = (order, targets, starts)
        order, targets, starts = self._plan
        out = np.zeros((g.shape[0], self.size))
        if len(order):
            out[:, targets] = np.add.reduceat(g[:, order], starts, axis=1)
        return out


def take(a, index, axis: int = 1) -> Tensor:
    """Gather columns (axis=1) or rows (axis=0) of a 2-D tensor.

    ``index`` is an integer array or a prebuilt :class:`Gather`.
    """
    a = constant(a)
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"take expects a 2-D tensor and axis 0/1, got {a.shape}, axis={axis}")
    n = a.shape[axis]
    gather = index if isinstance(index, Gather) else Gather(index, n)
    if gather.size != n:
        raise ShapeError(f"gather built for size {gather.size}, axis has size {n}")
    out = np.take(a.data, gather.index, axis=axis)

    def fn(g):
        if axis == 1:
            return (gather.scatter_columns(g),)
        return (gather.scatter_columns(g.T).T,)

    return _record(out, (a,), fn)


def gather_sum(parts: Sequence[tuple]) -> Tensor:
    """``sum_k take(T_k, gather_k)`` over column gathers of equal output width."""
    if not parts:
        raise ShapeError("gather_sum needs at least one term")
    tensors, gathers = [], []
    out = None
    for t, g in parts:
        t = constant(t)
        g = g if isinstance(g, Gather) else Gather(g, t.shape[1])
        if g.size != t.shape[1]:
            raise ShapeError(f"gather built for size {g.size}, tensor has {t.shape[1]} columns")
        val = np.take(t.data, g.index, axis=1)
        if out is None:
            out = val
        elif val.shape != out.shape:
            raise ShapeError(f"gather_sum term shapes differ: {val.shape} vs {out.shape}")
        else:
            out += val
        tensors.append(t)
        gathers.append(g)

    def fn(grad):
        return [g.scatter_columns(grad) for g in gathers]

    return _record(out, tuple(tensors), fn)


class Segments:
    """Grouping of columns into ``n_segments`` buckets by ``segment`` id."""

    __slots__ = ("gather", "inv_counts")

    def __init__(self, segment, n_segments: int):
        self.gather = Gather(segment, n_segments)
        counts = np.bincount(self.gather.index, minlength=self.gather.size).astype(np.float64)
        self.inv_counts = 1.0 / np.maximum(counts, 1.0)

    @property
    def segment(self) -> np.ndarray:
        return self.gather.index


def segment_mean(a, segment, n_segments: int | None = None) -> Tensor:
    """Mean of the columns of ``a`` grouped by ``segment``; empty segments give zeros."""
    a = constant(a)
    seg = segment if isinstance(segment, Segments) else Segments(segment, n_segments)
    if a.data.ndim != 2 or a.shape[1] != len(seg.segment):
        raise ShapeError(f"segment_mean: {a.shape} vs {len(seg.segment)} segment ids")
    out = seg.gather.scatter_columns(a.data) * seg.inv_counts
    per_edge = seg.inv_counts[seg.segment]
    return _record(out, (a,), lambda g: (np.take(g, seg.segment, axis=1) * per_edge,))


def inverse(a) -> Tensor:
    a = constant(a)
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"inverse expects a square matrix, got {a.shape}")
    try:
        inv = np.linalg.inv(a.data)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("matrix is singular", float("inf")) from None
    _check_finite(inv, "inverse")
    return _record(inv, (a,), lambda g: (-inv.T @ g @ inv.T,))


def right_pseudo_inverse(u, cond_cap: float = 1e8) -> Tensor:
    """``U^T (U U^T)^{-1}`` for a wide full-row-rank ``U``.

    Built from differentiable primitives, so the backward pass goes through
    the explicit inverse of the small Gram matrix.
    """
    u = constant(u)
    if u.data.ndim != 2 or u.shape[1] < u.shape[0]:
        raise ShapeError(f"right pseudo-inverse needs a wide matrix, got {u.shape}")
    ut = transpose(u)
    gram = matmul(u, ut)
    _check_finite(gram.data, "U U^T")
    cond = float(np.linalg.cond(gram.data))
    if not np.isfinite(cond) or cond > cond_cap:
        raise SingularMatrixError(
            f"U U^T is ill-conditioned (condition estimate {cond:.3g} > {cond_cap:.3g})", cond
        )
    return matmul(ut, inverse(gram))


# --- driving the record -----------------------------------------------------


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> None:
    """Accumulate ``dloss/dparam`` into ``param.grad`` for every reached parameter.

    Parameters not reached by the loss keep their current gradient (zero after
    :meth:`Parameter.zero_grad`).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    rec = loss.record or current_record()
    if rec is None and not isinstance(loss, Parameter):
        raise AutodiffError("backward called without an active computation record")
    if rec is None:
        loss.grad += 1.0
        return
    allowed = None if params is None else {id(p) for p in params}
    for key, (param, g) in rec.gradients(loss).items():
        if allowed is None or key in allowed:
            param.grad += g


def gradient_check(
    f: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5
) -> float:
    """Max over parameter entries of ``|analytic - numeric| / max(1, |numeric|)``.

    ``f`` must build its graph from the current parameter values on every
    call. Central differences are used for the numeric side.
    """
    for p in params:
        p.zero_grad()
    with ComputationRecord():
        loss = f()
        backward(loss, params)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = f().item()
            flat[i] = old - eps
            down = f().item()
            flat[i] = old
            numeric = (up - down) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(numeric))
            if not np.isfinite(err):
                return float("inf")
            worst = max(worst, err)
        p.zero_grad()
    return worst
