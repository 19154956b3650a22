"""Dense tensors with reverse-mode automatic differentiation.

Every primitive produces a new :class:`Tensor`; when any input requires a
gradient the output records its parents and a closure mapping the output
gradient to input gradients. :func:`backward` walks the recorded graph in
reverse creation order, which is always a valid topological order because a
node can only be created after its parents.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradientMap",
    "ShapeError",
    "DomainError",
    "create",
    "as_tensor",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "square",
    "sqrt",
    "exp",
    "log",
    "reduce",
    "sum",
    "mean",
    "amax",
    "matmul",
    "reshape",
    "getitem",
    "transpose",
    "log_softmax",
    "softmax",
    "pick",
    "l2norm",
    "detach",
    "backward",
    "finite_diff_check",
    "count_ops",
]

_creation = itertools.count()
_op_counter: list[dict] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An operand lies outside the domain of the requested operation."""


class Tensor:
    """Row-major array of reals, optionally tracked for differentiation.

    ``data`` is a contiguous numpy array. Leaves created with
    ``requires_grad=True`` are the differentiation targets; intermediate
    results carry ``_parents`` and ``_grad_fn`` until the graph is released.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_grad_fn", "_seq", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = _contiguous(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise DomainError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._seq = next(_creation)
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

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # Operator sugar. Python scalars become constants of the tensor's dtype.
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims: bool = False):
        return sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return mean(self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def detach(self):
        return detach(self)

    def __getitem__(self, index):
        return getitem(self, index)


class GradientMap(dict):
    """Maps leaf tensors (by identity) to gradient arrays of the same shape."""

    def __getitem__(self, key: Tensor) -> np.ndarray:
        return dict.__getitem__(self, _Key(key))

    def __contains__(self, key) -> bool:
        return dict.__contains__(self, _Key(key))

    def get(self, key, default=None):
        return dict.get(self, _Key(key), default)

    def __setitem__(self, key, value):
        dict.__setitem__(self, _Key(key), value)

    def tensors(self) -> list[Tensor]:
        return [k.tensor for k in dict.keys(self)]


class _Key:
    __slots__ = ("tensor",)

    def __init__(self, tensor):
        self.tensor = tensor.tensor if isinstance(tensor, _Key) else tensor

    def __hash__(self):
        return id(self.tensor)

    def __eq__(self, other):
        return isinstance(other, _Key) and other.tensor is self.tensor


def create(shape: Sequence[int], values: Iterable[float], requires_grad: bool = False,
           dtype=np.float64) -> Tensor:
    """Build a tensor from a flat row-major value list."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"dimension extents must be positive, got {shape}")
    vals = np.asarray(list(values), dtype=dtype)
    if vals.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeError(f"{vals.size} values cannot fill shape {shape}")
    if not np.isfinite(vals).all():
        raise DomainError("non-finite input value")
    return Tensor(vals.reshape(shape), requires_grad=requires_grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _contiguous(data) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    arr = np.asarray(data)
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


def _result(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    if not np.isfinite(data).all():
        raise FloatingPointError("operation produced non-finite values")
    out.data = _contiguous(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._grad_fn = grad_fn if out.requires_grad else None
    out._seq = next(_creation)
    out.name = None
    return out


def _tally(kind: str, n: int) -> None:
    for counter in _op_counter:
        counter[kind] = counter.get(kind, 0) + int(n)


@contextmanager
def count_ops():
    """Collect floating-point operation counts from every primitive executed inside.

    Yields a dict of ``kind -> count``; matrix-style kernels report
    multiply-accumulates times two, elementwise kernels one per output value.
    """
    counter: dict[str, int] = {}
    _op_counter.append(counter)
    try:
        yield counter
    finally:
        _op_counter.remove(counter)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over broadcast axes so it matches ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    out = a.data + b.data
    _tally("elementwise", out.size)
    return _result(out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    out = a.data - b.data
    _tally("elementwise", out.size)
    return _result(out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    out = ad * bd
    _tally("elementwise", out.size)

    def grad_fn(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    _tally("elementwise", out.size)

    def grad_fn(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.dtype, copy=False)
    _tally("elementwise", out.size)
    return _result(out, (a,), lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    _tally("elementwise", ad.size)
    return _result(ad * ad, (a,), lambda g: (2 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    if a.requires_grad and np.any(out == 0):
        raise DomainError("sqrt is not differentiable at zero")
    _tally("elementwise", out.size)
    return _result(out, (a,), lambda g: (g / (2 * out),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as FloatingPointError below
        out = np.exp(a.data)
    _tally("elementwise", out.size)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    _tally("elementwise", ad.size)
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


_UNARY = {"relu": relu, "square": square, "sqrt": sqrt, "exp": exp, "log": log, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} takes one operand")
        return _UNARY[kind](as_tensor(a))
    raise ValueError(f"unknown elementwise op {kind!r}")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const_like(b, a)
    if isinstance(b, Tensor):
        return _const_like(a, b), b
    return as_tensor(a), as_tensor(b)


# ----------------------------------------------------------------- reductions

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim} dimensions")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def _expand(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...], keepdims: bool):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axes, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    _tally("elementwise", a.size)
    return _result(np.asarray(out), (a,), lambda g: (_expand(g, shape, axes, keepdims),))


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    shape = a.shape
    n = int(np.prod([shape[i] for i in axes], dtype=np.int64))
    out = a.data.mean(axis=axes, keepdims=keepdims)
    _tally("elementwise", a.size)
    return _result(np.asarray(out), (a,), lambda g: (_expand(g / n, shape, axes, keepdims),))


def amax(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Maximum over ``axes``; the gradient flows to the first maximum in row-major order."""
    axes = _norm_axes(axes, a.ndim)
    keep = [i for i in range(a.ndim) if i not in axes]
    moved = np.transpose(a.data, keep + list(axes))
    kept_shape = moved.shape[: len(keep)]
    flat = moved.reshape(kept_shape + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out = np.expand_dims(out, axes)
    perm = keep + list(axes)
    inv = np.argsort(perm)
    shape = a.shape

    def grad_fn(g):
        if keepdims:
            g = np.squeeze(g, axis=axes)
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        return (np.transpose(gflat.reshape(moved.shape), inv).reshape(shape),)

    _tally("elementwise", a.size)
    return _result(np.asarray(out), (a,), grad_fn)


def reduce(kind: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    fns = {"sum": sum, "mean": mean, "max": amax}
    if kind not in fns:
        raise ValueError(f"unknown reduction {kind!r}")
    return fns[kind](a, axes, keepdims)


# ------------------------------------------------------------ linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    _tally("matmul", 2 * a.shape[0] * a.shape[1] * b.shape[1])

    def grad_fn(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(src),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing; the gradient scatters back into a zero array."""
    out = a.data[index]
    shape, dtype = a.shape, a.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(np.array(out, copy=True), (a,), grad_fn)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


# ------------------------------------------------------- probability helpers

def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    _tally("elementwise", 3 * a.size)

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), grad_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Select ``a[i, index[i]]`` for each row of a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick needs [b, k] values and [b] indices, got {a.shape}, {index.shape}")
    if index.min(initial=0) < 0 or index.max(initial=0) >= a.shape[1]:
        raise DomainError("index out of range")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[rows, index] = g
        return (out,)

    return _result(a.data[rows, index], (a,), grad_fn)


def l2norm(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm over ``axes``; zero subgradient where the norm vanishes."""
    axes = _norm_axes(axes, a.ndim)
    ad = a.data
    nk = np.sqrt((ad * ad).sum(axis=axes, keepdims=True))
    out = nk if keepdims else np.squeeze(nk, axis=axes)
    _tally("elementwise", 2 * a.size)

    def grad_fn(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        safe = np.where(nk > 0, nk, 1)
        return (np.where(nk > 0, gk / safe, 0) * ad,)

    return _result(np.asarray(out), (a,), grad_fn)


# -------------------------------------------------------------- graph control

def detach(a: Tensor) -> Tensor:
    """Value-identical constant: no lineage, never a differentiation target."""
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.requires_grad = False
    out._parents = ()
    out._grad_fn = None
    out._seq = next(_creation)
    out.name = None
    return out


def backward(loss: Tensor, retain_graph: bool = False) -> GradientMap:
    """Gradients of a scalar ``loss`` with respect to every reachable leaf.

    Leaves that do not require gradients get no entry. Unless
    ``retain_graph`` is set, the lineage of intermediate nodes is released
    afterwards so the forward graph can be freed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._grad_fn is None:
        raise ValueError("loss has no recorded lineage")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad and id(p) not in nodes)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result = GradientMap()
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            result[node] = g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=parent.dtype, copy=True).reshape(parent.shape)
    if not retain_graph:
        for node in order:
            if node._grad_fn is not None:
                node._parents = ()
                node._grad_fn = None
    return result


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between the analytic and central-difference gradient of ``f`` at ``x``.

    ``f`` must map a tensor to a scalar tensor. Errors are measured per
    coordinate as ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ShapeError("f must return a scalar")
    if out._grad_fn is None:
        analytic = np.zeros_like(base)
    else:
        analytic = backward(out).get(probe, np.zeros_like(base))

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        plus = base.copy().reshape(-1)
        minus = plus.copy()
        plus[i] += eps
        minus[i] -= eps
        fp = f(Tensor(plus.reshape(base.shape))).item()
        fm = f(Tensor(minus.reshape(base.shape))).item()
        flat[i] = (fp - fm) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
