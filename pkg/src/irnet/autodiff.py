"""Minimal define-by-run reverse-mode differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
``Tape.backward`` walks the record in reverse and accumulates gradients into
every reachable :class:`Parameter`.  Outside a tape the same functions just
compute values, which is what evaluation uses.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import ContractError, DeterminismError, DimensionError, NumericError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array, optionally attached to a tape node."""

    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.tape: Tape | None = None

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
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Parameter(Tensor):
    """Named trainable leaf with a same-shape gradient accumulator."""

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable
    op: str


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations whose inputs require gradients are
    appended in execution order, so the record is topologically sorted by
    construction.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple, backward: Callable, op: str) -> int:
        node = len(self.records)
        self.records.append(_Record(out, inputs, backward, op))
        out.node = node
        out.tape = self
        return node

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1 or loss.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.records:
            raise ContractError("backward called on an empty tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Parameter] = {}
        if isinstance(loss, Parameter):
            leaves[id(loss)] = loss
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if isinstance(inp, Parameter):
                    leaves[key] = inp
        for key, param in leaves.items():
            g = grads.get(key)
            if g is not None:
                param.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every Parameter reachable from ``loss``."""
    if loss.tape is None:
        raise ContractError("loss was not computed under a Tape")
    loss.tape.backward(loss)


# ---------------------------------------------------------------------------
# primitive plumbing
# ---------------------------------------------------------------------------


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple, grad_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced a non-finite value")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, grad_fn, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


_relu_probe = threading.local()


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    """Elementwise product (numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise NumericError("div: division by zero")
    out = a.data / b.data
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)),
                 "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 2:
            return np.outer(g, b.data), a.data.T @ g
        if b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        return g * b.data, g * a.data

    return _emit(out, (a, b), grad_fn, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    probe = getattr(_relu_probe, "inputs", None)
    if probe is not None:
        probe.append(a.data.copy())
    # subgradient 0 at exactly 0
    active = a.data > 0
    return _emit(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("sqrt: non-positive input")
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"sum: axis {axis} out of range for shape {a.shape}")
    out = a.data.sum(axis=axis)

    def grad_fn(g):
        if axis is None:
            return (np.full(a.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit(np.asarray(out), (a,), grad_fn, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise DimensionError("mean: empty reduction")
    return scale(sum(a, axis), 1.0 / n)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tuple(ts), grad_fn, "concat")


def gather_rows(table, indices) -> Tensor:
    """Rows of ``table`` selected by integer ``indices`` (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2 or idx.ndim != 1:
        raise DimensionError(f"gather_rows: table {table.shape}, indices {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {table.shape[0]} rows")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit(table.data[idx], (table,), grad_fn, "gather_rows")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (a,), grad_fn, "softmax")


def masked_softmax(a, mask, axis: int = -1) -> Tensor:
    """Softmax restricted to entries where ``mask`` is true.

    Masked entries get weight exactly 0; a slice with no unmasked entry is
    all zeros.
    """
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    masked = np.where(mask, a.data, -np.inf)
    top = masked.max(axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(np.where(mask, a.data - top, -np.inf))
    denom = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (a,), grad_fn, "masked_softmax")


def log1p_sum_exp(a, mask=None, axis: int | None = None) -> Tensor:
    """``log(1 + sum(exp(x)))`` over the selected entries, overflow-safe.

    Computed as a log-sum-exp over ``{0} U x``.  With ``axis=None`` the whole
    (masked) array reduces to a scalar; otherwise one value per slice.  An
    empty selection gives 0.
    """
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("log1p_sum_exp: non-finite input")
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    x = np.where(mask, a.data, -np.inf)
    top = np.max(x, axis=axis, keepdims=True, initial=0.0)
    shifted = np.exp(np.where(mask, a.data - top, -np.inf))
    lse = top + np.log(np.exp(-top) + shifted.sum(axis=axis, keepdims=True))
    out = lse.sum() if axis is None else np.squeeze(lse, axis=axis)

    def grad_fn(g):
        gk = np.asarray(g) if axis is None else np.expand_dims(g, axis)
        return (gk * np.exp(np.where(mask, a.data - lse, -np.inf)),)

    return _emit(np.asarray(out, dtype=np.float64), (a,), grad_fn, "log1p_sum_exp")


def stable_log1p_sum_exp(values) -> Tensor:
    """Scalar ``log(1 + sum_i exp(v_i))``; the empty set maps to 0."""
    values = as_tensor(values)
    return log1p_sum_exp(reshape(values, (values.size,)) if values.ndim != 1 else values)


def guard_denominator(a, eps: float = 1e-8) -> tuple[Tensor, np.ndarray]:
    """Replace entries with ``|x| < eps`` by ``+-eps`` (zero gradient there).

    Returns the guarded tensor and the boolean mask of replaced entries.
    """
    a = as_tensor(a)
    small = np.abs(a.data) < eps
    out = np.where(small, np.where(a.data < 0, -eps, eps), a.data)
    return _emit(out, (a,), lambda g: (np.where(small, 0.0, g),), "guard_denominator"), small


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_excluded: int
    worst: tuple[str, int] | None


def _evaluate(builder: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    _relu_probe.inputs = []
    try:
        value = builder()
        signs = [np.sign(x) for x in _relu_probe.inputs]
    finally:
        _relu_probe.inputs = None
    return float(as_tensor(value).item()), signs


def _same_signs(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_report(builder: Callable[[], Tensor], params: Iterable[Parameter],
                       step: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients against central differences entry by entry.

    Entries whose +-step perturbation changes the sign pattern of any relu
    input sit on a kink and are excluded from the maximum.
    """
    if not 0 < step <= 1e-2:
        raise ContractError(f"step must lie in (0, 1e-2], got {step}")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = builder()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    base_val, base_signs = _evaluate(builder)
    again_val, again_signs = _evaluate(builder)
    if base_val != again_val or not _same_signs(base_signs, again_signs):
        raise DeterminismError(f"loss builder is not deterministic ({base_val!r} vs {again_val!r})")
    if base_val != loss.item():
        raise DeterminismError("taped and untaped evaluations differ")

    worst_err, worst = 0.0, None
    n_checked = n_excluded = 0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            f_plus, s_plus = _evaluate(builder)
            flat[k] = orig - step
            f_minus, s_minus = _evaluate(builder)
            flat[k] = orig
            if not (_same_signs(s_plus, base_signs) and _same_signs(s_minus, base_signs)):
                n_excluded += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(gflat[k] - numeric) / max(1.0, abs(gflat[k]))
            n_checked += 1
            if worst is None or err > worst_err:
                worst_err, worst = err, (p.name, k)
    for p in params:
        p.zero_grad()
    return GradCheckReport(worst_err, n_checked, n_excluded, worst)


def finite_diff_check(builder: Callable[[], Tensor], params: Iterable[Parameter],
                      step: float = 1e-5) -> float:
    """Max over parameter entries of ``|analytic - central| / max(1, |analytic|)``."""
    return finite_diff_report(builder, params, step).max_rel_error
