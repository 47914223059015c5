"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation works on :class:`Tensor` objects wrapping a numpy array.
When a :class:`Tape` is active (``with tape:``) each primitive records its
parents and an adjoint rule; :func:`backward` then walks the record in
reverse order and returns gradients for the requested leaves.  Outside a
tape the same functions simply compute values, which is what rollouts use.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Adam",
    "AutodiffError",
    "NumericOverflowError",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "clip_by_global_norm",
    "concat",
    "constant",
    "exp",
    "gather",
    "log",
    "log_softmax",
    "lstm_gates",
    "logsumexp",
    "matmul",
    "mean",
    "mul",
    "neg",
    "parameter",
    "reshape",
    "sigmoid",
    "slice_",
    "softmax",
    "stack",
    "sub",
    "sum_",
    "tanh",
]


class AutodiffError(Exception):
    """Base class for errors raised by the differentiation layer."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        desc = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class NumericOverflowError(AutodiffError, FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite value produced")


class Tensor:
    """Dense float64 array, optionally a node of the active tape."""

    __slots__ = ("value", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericOverflowError("tensor")
        self.value = arr
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, node={self.node})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of primitive operations.

    Records are ``(output, parents, adjoint)`` triples appended in execution
    order, so parents always precede children.  ``backward`` never mutates
    the record, hence it can be run several times on the same tape.
    """

    _active: list["Tape"] = []

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        Tape._active.append(self)
        return self

    def __exit__(self, *exc):
        Tape._active.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        for out, _, _ in self.records:
            out.node = None
        self.records.clear()

    def record(self, out: Tensor, parents: tuple[Tensor, ...], adjoint: Callable) -> None:
        out.node = len(self.records)
        self.records.append((out, parents, adjoint))


def _current() -> Tape | None:
    return Tape._active[-1] if Tape._active else None


def _tracked(t: Tensor) -> bool:
    # cheap filter used inside adjoints; backward re-checks tape membership
    return t.requires_grad or t.node is not None


def _on_tape(t: Tensor, tape: Tape) -> bool:
    return t.node is not None and t.node < len(tape.records) and tape.records[t.node][0] is t


def _finite(value: np.ndarray) -> bool:
    # any NaN/Inf entry makes the sum non-finite
    return math.isfinite(float(np.add.reduce(value, axis=None)))


def _emit(
    op: str, value: np.ndarray, parents: tuple[Tensor, ...], adjoint: Callable, check: bool = True
) -> Tensor:
    # ops that are closed over finite inputs (bounded maps, reindexing) pass check=False
    if check and not _finite(value):
        raise NumericOverflowError(op)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.requires_grad = False
    out.node = None
    out.name = None
    tape = _current()
    if tape is not None and any(p.requires_grad or _on_tape(p, tape) for p in parents):
        tape.record(out, parents, adjoint)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# primitives
# Adjoints have signature adjoint(g_out, acc) where acc(tensor, grad, index=None)
# accumulates a contribution into the gradient buffer of a parent.


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a, b)

    def adjoint(g, acc):
        if _tracked(a):
            acc(a, _unbroadcast(g, a.shape))
        if _tracked(b):
            acc(b, _unbroadcast(g, b.shape))

    return _emit("add", a.value + b.value, (a, b), adjoint)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("sub", a, b)

    def adjoint(g, acc):
        if _tracked(a):
            acc(a, _unbroadcast(g, a.shape))
        if _tracked(b):
            acc(b, -_unbroadcast(g, b.shape))

    return _emit("sub", a.value - b.value, (a, b), adjoint)


def neg(a) -> Tensor:
    a = constant(a)
    return _emit("neg", -a.value, (a,), lambda g, acc: acc(a, -g), check=False)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("mul", a, b)

    def adjoint(g, acc):
        if _tracked(a):
            acc(a, _unbroadcast(g * b.value, a.shape))
        if _tracked(b):
            acc(b, _unbroadcast(g * a.value, b.shape))

    return _emit("mul", a.value * b.value, (a, b), adjoint)


def matmul(a, b) -> Tensor:
    """2-D matrix product (or batched over leading axes of ``a``)."""
    a, b = constant(a), constant(b)
    if b.value.ndim != 2 or a.value.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    lead = a.shape[:-1]
    # flatten leading axes so the product is a single BLAS call
    a2 = a.value.reshape(-1, a.shape[-1])

    def adjoint(g, acc):
        g2 = g.reshape(-1, g.shape[-1])
        if _tracked(a):
            acc(a, (g2 @ b.value.T).reshape(a.shape))
        if _tracked(b):
            acc(b, a2.T @ g2)

    return _emit("matmul", (a2 @ b.value).reshape(lead + (b.shape[1],)), (a, b), adjoint)


def sigmoid(a) -> Tensor:
    a = constant(a)
    # tanh form is overflow-free for any finite input
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _emit("sigmoid", s, (a,), lambda g, acc: acc(a, g * s * (1.0 - s)), check=False)


def tanh(a) -> Tensor:
    a = constant(a)
    t = np.tanh(a.value)
    return _emit("tanh", t, (a,), lambda g, acc: acc(a, g * (1.0 - t * t)), check=False)


def exp(a) -> Tensor:
    a = constant(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.value)
    return _emit("exp", e, (a,), lambda g, acc: acc(a, g * e))


def log(a) -> Tensor:
    a = constant(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.log(a.value)
    return _emit("log", v, (a,), lambda g, acc: acc(a, g / a.value))


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    axes = _axis_tuple(axis, a.value.ndim)
    v = a.value.sum(axis=axes, keepdims=keepdims)

    def adjoint(g, acc):
        if not keepdims:
            g = np.expand_dims(g, axes)
        acc(a, np.broadcast_to(g, a.shape))

    return _emit("sum", v, (a,), adjoint)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    axes = _axis_tuple(axis, a.value.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean", a.shape)
    v = a.value.mean(axis=axes, keepdims=keepdims)

    def adjoint(g, acc):
        if not keepdims:
            g = np.expand_dims(g, axes)
        acc(a, np.broadcast_to(g / count, a.shape))

    return _emit("mean", v, (a,), adjoint)


def logsumexp(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp."""
    a = constant(a)
    axes = _axis_tuple(axis, a.value.ndim)
    if a.size == 0:
        raise ShapeError("logsumexp", a.shape)
    m = a.value.max(axis=axes, keepdims=True)
    w = np.exp(a.value - m)
    s = w.sum(axis=axes, keepdims=True)
    v = m + np.log(s)
    soft = w / s
    out = v if keepdims else np.squeeze(v, axis=axes)

    def adjoint(g, acc):
        if not keepdims:
            g = np.expand_dims(g, axes)
        acc(a, g * soft)

    return _emit("logsumexp", out, (a,), adjoint)


def softmax(a, axis: int = -1) -> Tensor:
    a = constant(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g, acc):
        acc(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _emit("softmax", s, (a,), adjoint, check=False)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = constant(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    v = z - lse
    s = np.exp(v)

    def adjoint(g, acc):
        acc(a, g - s * g.sum(axis=axis, keepdims=True))

    return _emit("log_softmax", v, (a,), adjoint)


def lstm_gates(z, c) -> Tensor:
    """Fused LSTM cell update from pre-activations ``z`` (batch, 4H), gate
    order (input, forget, output, candidate), and previous cell ``c``.

    Returns ``[h, c_new]`` concatenated along the last axis (batch, 2H).
    """
    z, c = constant(z), constant(c)
    hd = c.shape[-1]
    if z.shape[:-1] != c.shape[:-1] or z.shape[-1] != 4 * hd:
        raise ShapeError("lstm_gates", z.shape, c.shape)
    zv = z.value
    sig = 0.5 * (1.0 + np.tanh(0.5 * zv[..., : 3 * hd]))
    i_g, f_g, o_g = sig[..., :hd], sig[..., hd : 2 * hd], sig[..., 2 * hd :]
    u = np.tanh(zv[..., 3 * hd :])
    c_new = f_g * c.value + i_g * u
    tc = np.tanh(c_new)
    out = np.concatenate([o_g * tc, c_new], axis=-1)

    def adjoint(g, acc):
        gh, gc = g[..., :hd], g[..., hd:]
        dc = gc + gh * o_g * (1.0 - tc * tc)
        if _tracked(z):
            dz = np.empty_like(zv)
            dz[..., :hd] = dc * u * i_g * (1.0 - i_g)
            dz[..., hd : 2 * hd] = dc * c.value * f_g * (1.0 - f_g)
            dz[..., 2 * hd : 3 * hd] = gh * tc * o_g * (1.0 - o_g)
            dz[..., 3 * hd :] = dc * i_g * (1.0 - u * u)
            acc(z, dz)
        if _tracked(c):
            acc(c, dc * f_g)

    return _emit("lstm_gates", out, (z, c), adjoint, check=False)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [constant(t) for t in tensors]
    try:
        v = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    ax = axis % v.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def adjoint(g, acc):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if _tracked(t):
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                acc(t, g[tuple(idx)])

    return _emit("concat", v, tuple(ts), adjoint, check=False)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [constant(t) for t in tensors]
    try:
        v = np.stack([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in ts]) from None

    def adjoint(g, acc):
        parts = np.moveaxis(g, axis, 0)
        for t, gp in zip(ts, parts):
            if _tracked(t):
                acc(t, gp)

    return _emit("stack", v, tuple(ts), adjoint, check=False)


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing; the adjoint scatters into a shared buffer."""
    a = constant(a)
    try:
        v = a.value[index]
    except IndexError:
        raise ShapeError("slice", a.shape) from None
    return _emit("slice", np.asarray(v), (a,), lambda g, acc: acc(a, g, index), check=False)


def reshape(a, shape) -> Tensor:
    a = constant(a)
    try:
        v = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _emit("reshape", v, (a,), lambda g, acc: acc(a, g.reshape(a.shape)), check=False)


def gather(a, idx) -> Tensor:
    """One-hot gather along the last axis: out[...] = a[..., idx[...]]."""
    a = constant(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError("gather", a.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise ShapeError("gather", a.shape, idx.shape)
    v = np.take_along_axis(a.value, idx[..., None], axis=-1)[..., 0]

    def adjoint(g, acc):
        full = np.zeros(a.shape)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        acc(a, full)

    return _emit("gather", v, (a,), adjoint, check=False)


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, root: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Gradients of scalar ``root`` w.r.t. leaves.

    Returns a dict keyed by tensor.  If ``params`` is given, every entry is
    present (zeros for parameters the root does not depend on); otherwise
    all leaf tensors with ``requires_grad`` reached by the pass are returned.
    """
    if root.value.size != 1:
        raise ShapeError("backward (root must be scalar)", root.shape)
    if not tape.records:
        raise AutodiffError("backward: empty tape")
    if root.node is None or root.node >= len(tape.records) or tape.records[root.node][0] is not root:
        raise AutodiffError("backward: root was not recorded on this tape")

    node_grads: dict[int, np.ndarray] = {}
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}

    records = tape.records

    def acc(t: Tensor, g: np.ndarray, index=None):
        if t.node is not None and t.node < len(records) and records[t.node][0] is t:
            store, key = node_grads, t.node
        elif t.requires_grad:
            store, key = leaf_grads, id(t)
            leaves[key] = t
        else:
            return
        buf = store.get(key)
        if index is None:
            if buf is None:
                store[key] = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
            else:
                buf += g
        else:
            if buf is None:
                buf = np.zeros(t.shape)
                store[key] = buf
            buf[index] += g

    node_grads[root.node] = np.ones(root.shape)
    for i in range(root.node, -1, -1):
        g = node_grads.pop(i, None)
        if g is None:
            continue
        _, _, adjoint = tape.records[i]
        adjoint(g, acc)

    def own(v):
        return np.array(v, dtype=np.float64, copy=True)

    if params is None:
        return {leaves[k]: own(v) for k, v in leaf_grads.items()}
    return {p: own(leaf_grads[id(p)]) if id(p) in leaf_grads else np.zeros(p.shape) for p in params}


# ---------------------------------------------------------------------------
# optimizer


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm is None or total <= max_norm or total == 0.0:
        return list(grads), total
    scale = max_norm / total
    return [g * scale for g in grads], total


class Adam:
    """Bias-corrected Adam with global-norm clipping.

    ``maximize=True`` turns the update into gradient ascent, which is how
    every estimator and policy objective in this package is trained.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        maximize: bool = False,
        clip_norm: float | None = 5.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.maximize = maximize
        self.clip_norm = clip_norm
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, grads) -> float:
        """Apply one update; ``grads`` is a gradient map or a list aligned with params.

        Returns the pre-clipping global gradient norm.
        """
        if isinstance(grads, dict):
            grads = [grads[p] for p in self.params]
        grads = [np.asarray(g, dtype=np.float64) for g in grads]
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ShapeError("adam_step", p.shape, g.shape)
            if not np.all(np.isfinite(g)):
                raise NumericOverflowError("adam_step")
        grads, norm = clip_by_global_norm(grads, self.clip_norm)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        sign = 1.0 if self.maximize else -1.0
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value = p.value + sign * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}
