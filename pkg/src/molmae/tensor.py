"""Dense tensors with a reverse-mode differentiation tape.

Only the operations the model needs are provided. Every op records a backward
rule on the thread's current :class:`Tape`; :func:`backward` replays the
records in exact reverse order.

Broadcasting is limited to adding a row vector (shape ``(d,)``) to a matrix.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5


class ShapeMismatch(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class NonScalarLoss(ValueError):
    pass


_state = threading.local()


def _dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def get_dtype() -> np.dtype:
    return _dtype()


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the default float width (32 or 64)."""
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    old = _dtype()
    _state.dtype = np.dtype(np.float64 if bits == 64 else np.float32)
    try:
        yield
    finally:
        _state.dtype = old


def set_precision(bits: int) -> None:
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _state.dtype = np.dtype(np.float64 if bits == 64 else np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=_dtype()), requires_grad=True, name=name)


def constant(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype or _dtype()))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Forward-ordered list of differentiable operations."""

    def __init__(self):
        self.records: list[Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def leaves(self) -> list[Tensor]:
        produced = {id(r.output) for r in self.records}
        seen: dict[int, Tensor] = {}
        for r in self.records:
            for t in r.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())


def _tape() -> Tape | None:
    return getattr(_state, "tape", None)


@contextlib.contextmanager
def recording():
    """Open a fresh tape on this thread and yield it."""
    old = _tape()
    tape = Tape()
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = old


@contextlib.contextmanager
def no_grad():
    old = _tape()
    _state.tape = None
    try:
        yield
    finally:
        _state.tape = old


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    tape = _tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.records.append(Record(op, inputs, out, bwd))
    return out


def backward(loss: Tensor, tape: Tape | None = None, leaves: Iterable[Tensor] = ()) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaves recorded on the tape (and any passed in ``leaves``) that do not
    influence the loss receive a zero gradient.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else _tape()
    if tape is None:
        raise RuntimeError("backward called outside a recording() block")
    for leaf in list(tape.leaves()) + list(leaves):
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    produced = {id(r.output) for r in tape.records}
    for leaf in tape.leaves():
        g = grads.get(id(leaf))
        if g is not None and id(leaf) not in produced:
            leaf.grad = leaf.grad + g.reshape(leaf.shape).astype(leaf.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# forward ops


def _check(cond: bool, op: str, *tensors) -> None:
    if not cond:
        shapes = ", ".join(str(getattr(t, "shape", t)) for t in tensors)
        raise ShapeMismatch(f"{op}: incompatible shapes {shapes}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))
    is_bias = a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]
    _check(is_bias, "add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, "sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, "mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0], "matmul", a, b)
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    _check(a.ndim == 2, "transpose", a)
    return _emit("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    _check(int(np.prod(shape)) == a.data.size, "reshape", a, shape)
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        same = t.ndim == tensors[0].ndim and all(
            s == r for k, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if k != ax
        )
        _check(same, "concat", *tensors)
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bwd)


def cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Column slice ``a[:, start:stop]``."""
    _check(a.ndim == 2 and 0 <= start <= stop <= a.shape[1], "cols", a, (start, stop))
    shape, dtype = a.shape, a.data.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g
        return (full,)

    return _emit("cols", a.data[:, start:stop], (a,), bwd)


def _index(idx, n: int, op: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexOutOfRange(f"{op}: index out of range [0, {n}) (min {idx.min()}, max {idx.max()})")
    return idx


def gather_rows(a: Tensor, idx) -> Tensor:
    """``a[idx]`` for a 1-D integer index array."""
    idx = _index(idx, a.shape[0], "gather_rows")
    shape, dtype = a.shape, a.data.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("gather_rows", a.data[idx], (a,), bwd)


def scatter_add(values: Tensor, groups, n_groups: int) -> Tensor:
    """Sum rows of ``values`` into ``n_groups`` buckets.

    Accumulation runs over rows in ascending order, so results are bit-exact
    across runs.
    """
    groups = _index(groups, n_groups, "scatter_add")
    values = as_tensor(values)
    _check(values.shape[0] == groups.size, "scatter_add", values, groups.shape)
    out = np.zeros((n_groups,) + values.shape[1:], dtype=values.data.dtype)
    np.add.at(out, groups, values.data)
    return _emit("scatter_add", out, (values,), lambda g: (g[groups],))


def select_rows(a: Tensor, mask) -> Tensor:
    """Rows of ``a`` where boolean ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    _check(mask.shape == (a.shape[0],), "select_rows", a, mask.shape)
    return gather_rows(a, np.flatnonzero(mask))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.size == 0:
        return _emit("softmax", x.copy(), (a,), lambda g: (g,))
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.size == 0:
        return _emit("log_softmax", x.copy(), (a,), lambda g: (g,))
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _emit("log_softmax", y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit("relu", np.where(pos, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)
    return _emit("softplus", y.astype(x.dtype), (a,), lambda g: (g * s,))


def layer_norm(a: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis of a 2-D tensor, then apply the optional affine."""
    _check(a.ndim == 2, "layer_norm", a)
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[1]

    def bwd(g):
        return (inv / d * (d * g - g.sum(axis=1, keepdims=True)
                           - xhat * (g * xhat).sum(axis=1, keepdims=True)),)

    out = _emit("layer_norm", xhat, (a,), bwd)
    if gamma is not None:
        _check(gamma.shape == (d,), "layer_norm", a, gamma)
        out = mul_rows(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def mul_rows(a: Tensor, v: Tensor) -> Tensor:
    """Scale every row of ``a`` elementwise by the vector ``v``."""
    _check(a.ndim == 2 and v.shape == (a.shape[1],), "mul_rows", a, v)
    ad, vd = a.data, v.data
    return _emit("mul_rows", ad * vd, (a, v), lambda g: (g * vd, (g * ad).sum(axis=0)))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _emit("sum", np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim
    return _emit("sum", a.data.sum(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / max(a.data.size, 1))


def l2_norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as 0."""
    ax = axis % a.ndim
    x = a.data
    n = np.sqrt((x * x).sum(axis=ax, keepdims=True))
    safe = np.where(n > 0, n, 1.0)

    def bwd(g):
        return (np.where(n > 0, x / safe, 0.0) * np.expand_dims(g, ax),)

    return _emit("l2_norm", np.squeeze(n, axis=ax), (a,), bwd)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return mul(a, constant(keep, a.data.dtype))


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float
    min_pass_fraction: float = 1.0

    @property
    def pass_fraction(self) -> float:
        if self.rel_error.size == 0:
            return 1.0
        return float((self.rel_error <= self.tol).mean())

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return self.pass_fraction >= self.min_pass_fraction


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients
    from turning round-off into huge ratios."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[..., Tensor], points: Sequence[Tensor] | Tensor, eps: float = 1e-6,
               tol: float = 1e-6, min_pass_fraction: float = 1.0, floor: float = 1e-4,
               coords: dict[int, np.ndarray] | None = None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*points)`` with central differences.

    ``points`` must be float64 parameter tensors. ``coords`` optionally maps a
    point index to the flat coordinates to probe (all by default).
    """
    if isinstance(points, Tensor):
        points = [points]
    points = list(points)
    for p in points:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check needs float64 tensors")
        p.grad = None
    with recording() as tape:
        out = f(*points)
        backward(out, tape, leaves=points)
    analytic, numeric = [], []
    with no_grad():
        for k, p in enumerate(points):
            flat = p.data.reshape(-1)
            which = coords.get(k) if coords is not None and k in coords else np.arange(flat.size)
            for i in which:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*points).data)
                flat[i] = orig - eps
                fm = float(f(*points).data)
                flat[i] = orig
                numeric.append((fp - fm) / (2 * eps))
                analytic.append(p.grad.reshape(-1)[i])
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return GradCheckReport(a, n, relative_error(a, n, floor), tol, min_pass_fraction)
