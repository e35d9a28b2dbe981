"""Dense tensors with define-by-run reverse-mode autodiff.

Every primitive op checks its output for NaN/Inf and raises
:class:`NonFiniteError` immediately. Ops are recorded only while a
:class:`Tape` is active and at least one input participates in the graph,
so inference code (decoding, evaluation) runs without recording anything.

Gradients land in ``.grad`` of leaf tensors created with
``requires_grad=True`` and nowhere else. Repeated backward passes add into
``.grad``; callers zero it explicitly (see :func:`zero_grad`).
"""

from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Tape",
    "backward",
    "check_gradient",
    "zero_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "silu",
    "rmsnorm",
    "softmax_lastdim",
    "reshape",
    "transpose",
    "split_lastdim",
    "concat",
    "embedding",
    "tensor_sum",
    "cross_entropy",
]


class NonFiniteError(FloatingPointError):
    """Raised when a kernel produces NaN or Inf."""


class Tensor:
    """n-dimensional array with optional gradient.

    ``data`` is always a C-contiguous float ndarray. Integer inputs are
    promoted to float64.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def tracks(self) -> bool:
        """True if gradients can flow into this tensor."""
        return self.requires_grad or self._node is not None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    # output and tape are weak so graphs free without the cycle collector
    output: weakref.ref
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: weakref.ref


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


@dataclass(eq=False)
class Tape:
    """Ordered record of executed primitives.

    Used as a context manager; tapes are thread-local and may nest (the
    innermost active tape records).
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    @staticmethod
    def current() -> Tape | None:
        stack = _tape_stack()
        return stack[-1] if stack else None

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def __len__(self) -> int:
        return len(self.nodes)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite output from {op}")


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    _check_finite(out, op)
    result = Tensor(out)
    tape = Tape.current()
    if tape is not None and any(t.tracks() for t in inputs):
        node = _Node(op, inputs, weakref.ref(result), grad_fn, weakref.ref(tape))
        result._node = node
        tape.nodes.append(node)
    return result


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Walks ``tape`` in exact reverse execution order. ``tape`` defaults to
    the tape that recorded ``loss``.
    """
    if loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return
    tape = tape if tape is not None else loss._node.tape()
    if tape is None:
        raise ValueError("the tape that recorded loss is gone; pass it explicitly")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        out = node.output()
        if out is None:
            continue
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.tracks():
                continue
            if inp._node is None or inp._node.tape() is not tape:
                if inp.requires_grad:
                    _accumulate(inp, gi)
                continue
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across a's leading axes) or has the same
    leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ValueError(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    if B.ndim == 2:
        # one GEMM over all leading rows instead of a batched loop
        out = (A.reshape(-1, A.shape[-1]) @ B).reshape(A.shape[:-1] + (B.shape[1],))
    else:
        out = A @ B

    def grad_fn(g):
        ga = gb = None
        if B.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            if a.tracks():
                ga = (g2 @ B.T).reshape(A.shape)
            if b.tracks():
                gb = A.reshape(-1, A.shape[-1]).T @ g2
        else:
            if a.tracks():
                ga = g @ np.swapaxes(B, -1, -2)
            if b.tracks():
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _emit("matmul", out, (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _emit(
        "add", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _emit(
        "sub", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    out = A * B
    return _emit(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * B, a.shape), _unbroadcast(g * A, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def silu(x: Tensor) -> Tensor:
    X = x.data
    s = expit(X)
    out = X * s
    return _emit("silu", out, (x,), lambda g: (g * s * (1 + X * (1 - s)),))


def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ValueError(f"rmsnorm gain {gain.shape} does not match last dim of {x.shape}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    X, G = x.data, gain.data
    d = X.shape[-1]
    inv = 1.0 / np.sqrt((X * X).mean(axis=-1, keepdims=True) + X.dtype.type(eps))
    xn = X * inv
    out = xn * G

    def grad_fn(g):
        gxn = g * G
        gx = inv * (gxn - xn * (gxn * xn).sum(axis=-1, keepdims=True) / d)
        ggain = (g * xn).reshape(-1, d).sum(axis=0)
        return gx, ggain

    return _emit("rmsnorm", out, (x, gain), grad_fn)


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    ``mask`` (broadcastable boolean, True = keep) zeroes excluded entries.
    Every row must keep at least one entry.
    """
    X = x.data
    if mask is not None:
        X = np.where(mask, X, X.dtype.type(-np.inf))
    p = X - X.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        gx = g - (g * p).sum(axis=-1, keepdims=True)
        gx *= p
        return (gx,)

    return _emit("softmax", p, (x,), grad_fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _emit("transpose", out, (x,), lambda g: (np.transpose(g, inverse),))


def split_lastdim(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split the last axis into consecutive chunks of the given sizes."""
    if sum(sizes) != x.shape[-1]:
        raise ValueError(f"split sizes {list(sizes)} do not cover last dim {x.shape[-1]}")
    out = []
    start = 0
    for n in sizes:
        lo, hi = start, start + n

        def grad_fn(g, lo=lo, hi=hi):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[..., lo:hi] = g
            return (full,)

        out.append(_emit("slice", np.ascontiguousarray(x.data[..., lo:hi]), (x,), grad_fn))
        start = hi
    return out


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    arrays = [t.data for t in xs]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(xs), grad_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embedding", out, (table,), grad_fn)


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``logits`` has shape ``(..., vocab)`` and ``targets`` the leading shape.
    """
    L = logits.data
    V = L.shape[-1]
    t = np.asarray(targets).reshape(-1)
    flat = L.reshape(-1, V)
    if t.shape[0] != flat.shape[0]:
        raise ValueError(f"{t.shape[0]} targets for {flat.shape[0]} logit rows")
    if t.size and (t.min() < 0 or t.max() >= V):
        raise IndexError(f"target out of range [0, {V})")
    m = flat.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(flat - m).sum(axis=-1))
    rows = np.arange(flat.shape[0])
    n = flat.shape[0]
    loss = np.asarray((lse - flat[rows, t]).sum() / n, dtype=L.dtype)

    def grad_fn(g):
        p = np.exp(flat - lse[:, None])
        p[rows, t] -= 1
        return ((p * (g / n)).reshape(L.shape),)

    return _emit("cross_entropy", loss, (logits,), grad_fn)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def check_gradient(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps a float64 tensor to a scalar tensor. The per-coordinate error
    is ``|ad - fd| / (|ad| + |fd| + 1e-12)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    backward(y, tape)
    ad = xt.grad if xt.grad is not None else np.zeros_like(x0)

    fd = np.zeros_like(x0)
    flat = fd.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2 * h)

    err = np.abs(ad - fd) / (np.abs(ad) + np.abs(fd) + 1e-12)
    return float(err.max()) if err.size else 0.0
