"""Minimal tape-based reverse-mode autodiff over float64 numpy arrays.

Every differentiable op records a node carrying a monotonically increasing
id. ``Tensor.backward`` collects the nodes reachable from the output and
replays them in descending id order, which is the reverse of recording order
and therefore a valid reverse topological order.
"""
from __future__ import annotations

import contextlib
import itertools
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

EPS_NORM = 1e-9
EPS_DIV = 1e-12


class NumericError(ArithmeticError):
    """A forward value became non-finite or a guarded division hit zero."""


class DimensionError(ValueError):
    pass


_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _Node:
    __slots__ = ("id", "parents", "backward")

    def __init__(self, parents, backward):
        self.id = next(_ids)
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        # collect reachable nodes
        nodes: dict[int, tuple[_Node, Tensor]] = {}
        stack = [self]
        seen = set()
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._node is not None:
                nodes[t._node.id] = (t._node, t)
                stack.extend(p for p in t._node.parents if p.requires_grad)
        for nid in sorted(nodes, reverse=True):
            node, out = nodes[nid]
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg
        # a leaf output seeded directly
        if self._node is None:
            self.grad = grads[id(self)] if self.grad is None else self.grad + grads[id(self)]

    # -- operator sugar ------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced in forward pass")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward)
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


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(np.abs(b.data) <= EPS_DIV):
        raise NumericError("division by a near-zero denominator")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data >= 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (np.where(out > EPS_NORM, g / (2.0 * np.maximum(out, EPS_NORM)), 0.0),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back)


# -- linear algebra ------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Leading batch axes must match exactly; a 2-D operand is shared across the
    other operand's batch axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        # one large gemm instead of a batched loop
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
    else:
        out = ad @ bd

        def back(g):
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
            if a.ndim == 2 and g.ndim > 2:
                ga = ga.reshape(-1, *ga.shape[-2:]).sum(axis=0)
            return ga, gb
    return _make(out, (a, b), back)


def l2_norm_lastdim(a, keepdims: bool = True) -> Tensor:
    """Euclidean norm over the last axis; zero vectors give zero gradient."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))

    def back(g):
        safe = np.maximum(out, EPS_NORM)
        gg = g if keepdims else g[..., None]
        return (np.where(out > EPS_NORM, gg * a.data / safe, 0.0),)

    return _make(out if keepdims else out[..., 0], (a,), back)


def frobenius(a) -> Tensor:
    return l2_norm_lastdim(reshape(a, (1, -1)), keepdims=False).reshape(())


# -- reductions ------------------------------------------------------------------
def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), back)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    if n == 0:
        raise DimensionError("mean over an empty axis")
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, (a,), back)


def reduce_max(a, axis: int = 0) -> Tensor:
    """Max along one axis; the gradient goes to the first maximizer."""
    a = as_tensor(a)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def back(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _make(out, (a,), back)


# -- shape manipulation ---------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a, idx) -> Tensor:
    """Indexing (basic or integer-array) with scatter-add backward."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.data[idx], (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _make(out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


# -- verification ----------------------------------------------------------------
def check_gradients(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per entry is ``|g_a - g_n| / max(1, |g_a|, |g_n|)``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise NumericError("objective is not finite")
    out.backward()
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ga = float(analytic.reshape(-1)[i])
                worst = max(worst, abs(ga - num) / max(1.0, abs(ga), abs(num)))
    return worst


# -- checkpoints -------------------------------------------------------------------
CKPT_MAGIC = b"SMCK1"


def save_checkpoint(path, tensors: dict) -> None:
    """Write named arrays in the SMCK1 layout; names are written sorted."""
    chunks = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        arr = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an SMCK1 checkpoint")
    (count,) = struct.unpack_from("<I", buf, 5)
    off = 9
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).copy()
        off += 8 * n
    return out
