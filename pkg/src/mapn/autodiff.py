"""Dense reverse-mode differentiation over numpy float64 arrays.

Every trainable computation in the package is expressed through :class:`Tensor`.
Graphs are built dynamically as operations run; :meth:`Tensor.backward` walks
them in reverse topological order and accumulates into ``.grad``.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph.

    ``op`` is the tag of the operation that produced the value; leaves have
    ``op == "leaf"``. ``grad`` is allocated on the first backward pass that
    reaches the node.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = parents
        self._backward = backward

    # -- basics -------------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operators ----------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, op=op,
                  parents=tuple(parents) if needs else (),
                  backward=backward if needs else None)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, "div", (a, b), bw)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics for 1-d, 2-d and batched 3-d operands."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ad, bd = a.data, b.data
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if ad.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        if bd.ndim == 1:
            gb = gb.reshape(gb.shape[:-1])
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, "matmul", (a, b), bw)


def dot(a, b) -> Tensor:
    """Inner product over the last axis."""
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError(f"dot: last axes differ, shapes {a.shape} and {b.shape}")
    return sum_(mul(a, b), axis=-1)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, "transpose", (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


# -- reductions ----------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, "sum", (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(out, "mean", (a,), bw)


def cumsum(a, axis: int) -> Tensor:
    a = _wrap(a)
    out = np.cumsum(a.data, axis=axis)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(out, "cumsum", (a,), bw)


def norm_p(a, p: float = 2.0, axis=None) -> Tensor:
    """Entrywise p-norm; the gradient at the zero vector is taken as zero."""
    a = _wrap(a)
    if p < 1:
        raise DomainError(f"norm_p: p must be >= 1, got {p}")
    absx = np.abs(a.data)
    out = np.power(np.power(absx, p).sum(axis=axis), 1.0 / p)

    def bw(g):
        o = out if axis is None else np.expand_dims(out, axis)
        gg = g if axis is None else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            local = np.sign(a.data) * np.power(absx, p - 1) / np.power(o, p - 1)
        local = np.where(o > 0, local, 0.0)
        return (gg * local,)

    return _make(out, "norm_p", (a,), bw)


# -- structure -----------------------------------------------------------------

def concat(items: Sequence, axis: int = -1) -> Tensor:
    ts = [_wrap(t) for t in items]
    if not ts:
        raise ShapeError("concat: no operands")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes "
                         + ", ".join(str(t.shape) for t in ts)) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, "concat", ts, bw)


def stack(items: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in items]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack: incompatible shapes "
                         + ", ".join(str(t.shape) for t in ts)) from None

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, "stack", ts, bw)


def getitem(a, index) -> Tensor:
    a = _wrap(a)
    out = a.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(out, "getitem", (a,), bw)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array of any shape."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _make(out, "take", (a,), bw)


# -- elementwise unary ---------------------------------------------------------

def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log: non-positive input (min {a.data.min():.3g})")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = _sigmoid(a.data)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; zero gradient outside the interval."""
    a = _wrap(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (g * inside,))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    a = _wrap(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, "softplus", (a,), lambda g: (g * _sigmoid(a.data),))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    # x == 0 takes the positive-side derivative
    a = _wrap(a)
    pos = a.data >= 0
    out = np.where(pos, a.data, slope * a.data)
    return _make(out, "leaky_relu", (a,), lambda g: (np.where(pos, g, slope * g),))


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    if a.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} in shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), bw)


# -- backward ------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every ancestor of the scalar ``root`` that requires grad.

    Gradients accumulate: calling this twice without resetting doubles them.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# -- parameters ----------------------------------------------------------------

class ParamStore:
    """Named trainable tensors with fixed shapes, in insertion order."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.init_specs: dict[str, str] = {}

    def add(self, name: str, value, init: str = "given") -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True)
        self._params[name] = t
        self.init_specs[name] = init
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def set(self, name: str, value) -> None:
        t = self._params[name]
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != t.shape:
            raise ShapeError(f"set {name}: shape {value.shape} != {t.shape}")
        t.data = value.copy()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.set(k, v)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(dumps(self))

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as fh:
            return loads(fh.read())


MAGIC = b"MAPN"
VERSION = 1


def dumps(store: ParamStore) -> bytes:
    """Binary checkpoint: magic, u32 version, then per entry
    u32 name length, name, u32 ndim, u32 dims, little-endian f64 payload."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, t in store.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> ParamStore:
    if buf[:4] != MAGIC:
        raise ValueError("not a MAPN checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8
    store = ParamStore()
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        store.add(name, data.astype(DTYPE), init="checkpoint")
    return store


# -- gradient checking -----------------------------------------------------------

_STENCILS = {2: ((1, 0.5), (-1, -0.5)),
             4: ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12))}


def grad_check(f: Callable[[], Tensor], params: ParamStore | Iterable[Tensor],
               eps: float = 1e-5, order: int = 2, floor: float = 1e-8) -> float:
    """Max relative error between backward gradients and central differences.

    ``order`` picks the 3-point (2) or 5-point (4) central stencil; the latter
    allows a larger ``eps`` and so less round-off. Relative error per entry is
    ``|analytic - numeric| / max(floor, |analytic| + |numeric|)``.
    """
    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}")
    tensors = list(params._params.values()) if isinstance(params, ParamStore) else list(params)
    for t in tensors:
        t.grad = None
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("grad_check: non-finite objective")
    backward(out)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            numeric = 0.0
            for step, weight in _STENCILS[order]:
                flat[i] = old + step * eps
                value = float(f().data)
                if not np.isfinite(value):
                    flat[i] = old
                    raise FloatingPointError("grad_check: non-finite objective under perturbation")
                numeric += weight * value
            flat[i] = old
            numeric /= eps
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(floor, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
