"""Reverse-mode automatic differentiation over dense numpy tensors.

A ``Tape`` records operations as they execute (define-by-run).  Each recorded
node keeps a closure that maps the gradient of its output onto gradients of
its inputs; ``backward`` replays the tape once, in reverse creation order,
which is already a valid topological order.

Deliberate restrictions, enforced with explicit errors:

* operands must share a dtype (float32 by default, float64 via ``precision``),
* no broadcasting except adding a bias vector over the rows of a matrix,
* ReLU uses subgradient 0 at the kink.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """An operation was applied to tensors with incompatible shapes."""


class TapeError(RuntimeError):
    """Backward was asked to differentiate something the tape cannot support."""


_state = threading.local()


def _default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(bits: int):
    """Run a block under 32- or 64-bit default float precision."""
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    prev = _default_dtype()
    _state.dtype = np.dtype(np.float64 if bits == 64 else np.float32)
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """A dense array plus a flag marking it as trainable."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            dtype = _default_dtype()
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    # Operator sugar; every route goes through the module-level ops so that
    # recording happens in exactly one place.
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of operations; also a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def append(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()


def _active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording even if a tape is active."""
    stack = getattr(_state, "tapes", None)
    _state.tapes = []
    try:
        yield
    finally:
        _state.tapes = stack


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, grad_fn) -> Tensor:
    out_data = np.asarray(out_data)
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs),
                 dtype=out_data.dtype)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.append(Node(op, inputs, out, grad_fn))
    return out


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every trainable leaf reachable on the tape.

    Visits each node exactly once, in reverse recording order.  Returns a map
    from leaf Tensor to its gradient array.
    """
    if loss.size != 1:
        raise TapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise TapeError("backward: loss was not produced on this tape")
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        gout = flowing.pop(id(node.output), None)
        if gout is None:
            continue
        gins = node.grad_fn(gout)
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            if tape.produced(t):
                acc = flowing.get(id(t))
                flowing[id(t)] = g if acc is None else acc + g
            else:
                acc = leaf_grads.get(t)
                leaf_grads[t] = np.array(g, copy=True) if acc is None else acc + g
    return leaf_grads


# ---------------------------------------------------------------------------
# Elementwise and arithmetic ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; the single allowed broadcast is matrix + row vector."""
    _check_same_dtype("add", a, b)
    if a.shape == b.shape:
        return _record("add", (a, b), a.data + b.data, lambda g: (g, g))
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return _record("add", (a, b), a.data + b.data,
                       lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _record("add_scalar", (a,), a.data + c, lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd,
                   lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias with weight laid out (out_features, in_features)."""
    _check_same_dtype("linear", *(t for t in (x, weight, bias) if t is not None))
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return _record("linear", (x, weight), out,
                       lambda g: (g @ wd, g.T @ xd))
    out = out + bias.data
    return _record("linear", (x, weight, bias), out,
                   lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at exactly 0 is 0
    return _record("relu", (a,), np.where(mask, a.data, 0), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-a.data))
    return _record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record("exp", (a,), y, lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.log(a.data)
    return _record("log", (a,), y, lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values into [lo, hi]; gradient is zero outside the range."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", (a,), y, grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (a,), y, grad_fn)


# ---------------------------------------------------------------------------
# Reductions and structure ops
# ---------------------------------------------------------------------------


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _record("sum", (a,), np.asarray(a.data.sum()),
                       lambda g: (np.broadcast_to(g, a.shape).copy(),))
    shape = a.shape

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", (a,), a.data.sum(axis=axis), grad_fn)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.size
        return _record("mean", (a,), np.asarray(a.data.mean()),
                       lambda g: (np.broadcast_to(g / n, a.shape).copy(),))
    n = a.shape[axis]
    shape = a.shape

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _record("mean", (a,), a.data.mean(axis=axis), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    _check_same_dtype("concat", *tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}") from e
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tensors, out, grad_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(f"narrow: [{start}:{start + length}] outside axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def grad_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _record("narrow", (a,), a.data[index].copy(), grad_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _record("reshape", (a,), a.data.reshape(shape),
                   lambda g: (g.reshape(a.shape),))


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup into (vocab, dim) table; gradients scatter-add by index."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table {table.shape}")

    def grad_fn(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _record("embedding", (table,), table.data[idx], grad_fn)


def col_scatter(a: Tensor, cols: np.ndarray, width: int) -> Tensor:
    """Place the columns of (m, k) into a zero (m, width) matrix at ``cols``."""
    cols = np.asarray(cols, dtype=np.int64)
    if a.ndim != 2 or cols.shape != (a.shape[1],):
        raise ShapeError(f"col_scatter: input {a.shape} vs {cols.shape} columns")
    out = np.zeros((a.shape[0], width), dtype=a.dtype)
    out[:, cols] = a.data
    return _record("col_scatter", (a,), out, lambda g: (g[:, cols],))


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients with central differences."""

    epsilon: float
    tolerance: float
    per_param_max_rel_err: dict[str, float] = field(default_factory=dict)
    max_rel_err: float = 0.0
    passed: bool = True
    nondifferentiable: list[tuple[str, int]] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {status}: max_rel_err={self.max_rel_err:.3e} "
                f"eps={self.epsilon:g} tol={self.tolerance:g} "
                f"kinks={len(self.nondifferentiable)} failures={len(self.failures)}")


def finite_diff_check(fn: Callable[[], Tensor],
                      params: dict[str, Tensor],
                      epsilon: float = 1e-5,
                      tolerance: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must be deterministic and must read parameter values afresh on each
    call.  Relative error uses max(|analytic|, |numeric|, 1e-8) in the
    denominator.  Coordinates where the left and right one-sided derivatives
    disagree (a kink, e.g. ReLU evaluated exactly at 0) are reported as
    nondifferentiable and excluded from the pass/fail verdict, as are
    coordinates whose perturbed evaluation is non-finite (recorded as
    failures).
    """
    with Tape() as tape:
        loss = fn()
    grads = backward(tape, loss)
    f0 = loss.item()
    report = GradCheckReport(epsilon=epsilon, tolerance=tolerance)
    if not np.isfinite(f0):
        report.passed = False
        report.failures.append("base evaluation is non-finite")
        return report
    for name, p in params.items():
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = np.asarray(analytic, dtype=np.float64).reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            with no_grad():
                f_plus = fn().item()
            flat[i] = orig - epsilon
            with no_grad():
                f_minus = fn().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                report.failures.append(f"{name}[{i}]: non-finite perturbed value")
                report.passed = False
                continue
            d_right = (f_plus - f0) / epsilon
            d_left = (f0 - f_minus) / epsilon
            kink_scale = max(abs(d_right), abs(d_left), 1.0)
            if abs(d_right - d_left) > 0.01 * kink_scale:
                report.nondifferentiable.append((name, i))
                continue
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            rel = abs(aflat[i] - numeric) / denom
            worst = max(worst, rel)
        report.per_param_max_rel_err[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    if report.max_rel_err > tolerance:
        report.passed = False
    return report
