"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray``. Every primitive applied to tensors
that require gradients records its parents and a closure computing the
vector-Jacobian product, so the graph is implicit in the parent links.
:func:`grad` and :meth:`Tensor.backward` walk it in reverse topological
order, visiting each node once and summing contributions of nodes used
more than once.

Training runs in float32; gradient checks switch to float64 with
:func:`precision`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError, NumericError, UsageError

__all__ = [
    "Tensor", "tensor", "precision", "get_default_dtype", "set_default_dtype",
    "grad", "grad_check",
    "add", "sub", "mul", "div", "neg", "matmul", "sum", "mean", "square",
    "sqrt", "log", "exp", "relu", "tanh", "sigmoid", "clamp", "reshape",
    "transpose", "concat", "stack", "pad", "norm2", "tps_phi", "solve",
    "conv2d", "avg_pool2d",
]

_state = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise UsageError(f"unsupported dtype {dtype}; use float32 or float64")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

    @property
    def shape(self) -> tuple:
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

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        grads = _backprop(self)
        for node, g in grads.items():
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return _getitem(self, idx)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        return _power(self, p)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)
    def transpose(self, *axes): return transpose(self, axes or None)

    @property
    def T(self): return transpose(self, None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        dtype = like.dtype
    elif isinstance(x, np.ndarray) and np.issubdtype(x.dtype, np.floating):
        dtype = x.dtype
    else:
        dtype = get_default_dtype()
    return Tensor._wrap(np.asarray(x, dtype=dtype), False)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: produced non-finite values")
    rg = any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, rg)
    out.op = op
    if rg:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(loss: Tensor) -> dict:
    if not isinstance(loss, Tensor):
        raise UsageError("backward: loss must be a Tensor")
    if loss.size != 1:
        raise UsageError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward: loss is detached from every tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = grads[k] + gp if k in grads else gp
    return leaves


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to each tensor in ``wrt``.

    Tensors the loss does not depend on get zeros. Unlike
    :meth:`Tensor.backward` nothing is stored on the tensors.
    """
    wrt = list(wrt)
    if isinstance(loss, Tensor) and loss.size == 1 and not loss.requires_grad:
        return [np.zeros_like(w.data) for w in wrt]
    leaves = _backprop(loss)
    return [leaves.get(w, np.zeros_like(w.data)) for w in wrt]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _bshape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _bshape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _bshape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _bshape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _bshape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def square(x) -> Tensor:
    x = _as_tensor(x)
    return _make("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def _power(x: Tensor, p: float) -> Tensor:
    return _make("power", x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(x.data)
    return _make("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log: non-positive input")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):  # overflow is reported as NumericError by _make
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1 - out * out),))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = 0.5 * (1 + np.tanh(0.5 * x.data))  # stable for large |x|
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def clamp(x, lo=None, hi=None) -> Tensor:
    x = _as_tensor(x)
    out = np.clip(x.data, lo, hi)
    mask = np.ones(x.shape, dtype=bool)
    if lo is not None:
        mask &= x.data >= lo
    if hi is not None:
        mask &= x.data <= hi
    return _make("clamp", out, (x,), lambda g: (g * mask,))


# reductions and shape manipulation

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make("sum", np.asarray(out), (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is not None:
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
    else:
        inv = None
    return _make("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis
               for i in items)


def _getitem(x: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make("slice", np.array(out), (x,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in ts]
    return concat(expanded, axis=axis)


def pad(x, width: int, mode: str = "zero") -> Tensor:
    """Pad the last two axes by ``width`` on every side ("zero" or "edge")."""
    x = _as_tensor(x)
    p = int(width)
    if p == 0:
        return x
    pad_width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    if mode == "zero":
        out = np.pad(x.data, pad_width)
    elif mode == "edge":
        out = np.pad(x.data, pad_width, mode="edge")
    else:
        raise UsageError(f"pad: unknown mode {mode!r}")

    def back(g):
        if mode == "edge":
            g = g.copy()
            g[..., p, :] += g[..., :p, :].sum(axis=-2)
            g[..., -p - 1, :] += g[..., -p:, :].sum(axis=-2)
            g[..., :, p] += g[..., :, :p].sum(axis=-1)
            g[..., :, -p - 1] += g[..., :, -p:].sum(axis=-1)
        return (g[..., p:-p, p:-p],)

    return _make("pad", out, (x,), back)


# linear algebra

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1,) + a.shape), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, b.shape + (1,))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), back)


def solve(A, B) -> Tensor:
    """Solve ``A X = B`` for X; batched over leading axes.

    Computed in float64 regardless of input precision and cast back.
    """
    A, B = _pair(A, B)
    if A.shape[-1] != A.shape[-2] or A.shape[-1] != B.shape[-2]:
        raise DimensionError(f"solve: incompatible shapes {A.shape} and {B.shape}")
    a64 = A.data.astype(np.float64)
    x64 = np.linalg.solve(a64, B.data.astype(np.float64))
    dtype = np.result_type(A.dtype, B.dtype)

    def back(g):
        gb = np.linalg.solve(np.swapaxes(a64, -1, -2), g.astype(np.float64))
        ga = -np.matmul(gb, np.swapaxes(x64, -1, -2))
        return (_unbroadcast(ga, A.shape).astype(dtype),
                _unbroadcast(gb, B.shape).astype(dtype))

    return _make("solve", x64.astype(dtype), (A, B), back)


def norm2(x) -> Tensor:
    """Euclidean norm over a trailing axis of length 2."""
    x = _as_tensor(x)
    if x.shape[-1] != 2:
        raise DimensionError(f"norm2: trailing axis must have length 2, got shape {x.shape}")
    r = np.sqrt(np.sum(x.data * x.data, axis=-1))

    def back(g):
        safe = np.where(r > 0, r, 1)
        return (np.where(r[..., None] > 0, x.data / safe[..., None], 0) * g[..., None],)

    return _make("norm2", r, (x,), back)


def tps_phi(d) -> Tensor:
    """Thin-plate kernel r^2 log r of the norm of 2-vectors ``d`` (trailing axis).

    Written as 0.5*s*log(s) with s = |d|^2 so the value and the gradient
    d*(log s + 1) both extend continuously to 0 at d = 0.
    """
    d = _as_tensor(d)
    if d.shape[-1] != 2:
        raise DimensionError(f"tps_phi: trailing axis must have length 2, got shape {d.shape}")
    s = np.sum(d.data * d.data, axis=-1)
    pos = s > 0
    logs = np.log(np.where(pos, s, 1))
    out = np.where(pos, 0.5 * s * logs, 0).astype(d.dtype)

    def back(g):
        coef = np.where(pos, logs + 1, 0)
        return ((g * coef)[..., None] * d.data,)

    return _make("tps_phi", out, (d,), back)


# convolution and pooling (NCHW layout)

def conv2d(x, w, b=None, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation with zero padding."""
    x = _as_tensor(x)
    w = _as_tensor(w, x)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    kh, kw = w.shape[2:]
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise DimensionError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b, x)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv2d: bias shape {b.shape} does not match kernel {w.shape}")
        out = out + b.data[None, :, None, None]
        parents.append(b)
    out = np.ascontiguousarray(out)

    def back(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gcols = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            gxp = np.tensordot(gcols, w.data[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
            gxp = gxp.transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:gxp.shape[2] - p, p:gxp.shape[3] - p] if p else gxp
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return res

    return _make("conv2d", out, parents, back)


def avg_pool2d(x, k: int = 2) -> Tensor:
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: spatial shape {(h, w)} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def back(g):
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (g / (k * k),)

    return _make("avg_pool2d", out, (x,), back)


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |a - n| / max(1e-12, |a| + |n|). Always runs
    in float64.
    """
    with precision(np.float64):
        x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        t = Tensor(x0, requires_grad=True)
        analytic = grad(f(t), [t])[0]
        numeric = np.empty_like(x0)
        flat = x0.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(x0)).item()
            flat[i] = orig - h
            fm = f(Tensor(x0)).item()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0
