"""Dense f64 tensors with reverse-mode automatic differentiation.

Every differentiable operation appends a :class:`Node` to an implicit,
append-only graph.  Node sequence numbers grow monotonically, so visiting
the nodes reachable from a loss in descending sequence order is a valid
reverse topological order; :func:`backward` relies on exactly that.

Broadcasting follows numpy's trailing-dimension rule.  Gradients of a
broadcast operand are summed back over the broadcast axes.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "DimensionError",
    "GraphStateError",
    "ContractError",
    "tensor",
    "as_tensor",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "clamp",
    "gelu",
    "reduce",
    "sum",
    "mean",
    "max",
    "reshape",
    "transpose",
    "softmax_attention",
    "layer_norm",
    "backward",
    "grad",
    "no_grad",
    "is_grad_enabled",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with an operation."""


class GraphStateError(RuntimeError):
    """The autodiff graph is in a state that forbids the requested action."""


class ContractError(ValueError):
    """An operation precondition other than shape was violated."""


_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """One recorded operation: its parents and the vector-Jacobian product."""

    __slots__ = ("seq", "op", "parents", "vjp", "consumed")

    def __init__(self, op: str, parents: tuple, vjp: Callable):
        self.seq = next(_seq)
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    # make numpy defer to our reflected operators (ndarray * Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce("max", self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _make(arr: np.ndarray, op: str, parents: tuple, vjp: Callable) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, requires_grad=needs)
    if needs:
        out.node = Node(op, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` over the axes that broadcasting expanded."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcastable"
        ) from None


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _make(out, "div", (a, b), vjp)


# ----------------------------------------------------------------- unary ops


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log.  Callers clamp into the positive domain first."""
    a = as_tensor(a)
    ad = a.data
    if np.any(ad <= 0):
        raise ContractError("log: non-positive input; clamp before taking the log")
    return _make(np.log(ad), "log", (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ContractError("sqrt: negative input; clamp before taking the root")
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip into ``[lo, hi]``; the gradient is zero where clipping was active."""
    a = as_tensor(a)
    x = a.data
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    out = np.clip(x, lo_, hi_)
    inside = (x >= lo_) & (x <= hi_)
    return _make(out, "clamp", (a,), lambda g: (g * inside,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner
        return (g * d,)

    return _make(out, "gelu", (a,), vjp)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sigmoid": sigmoid,
    "clamp": clamp,
    "gelu": gelu,
    "neg": neg,
}


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch an elementwise operation by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------- reductions


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} is out of range for a {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise DimensionError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(op: str, t, axes=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    ax = _norm_axes(axes, t.ndim)
    shape = t.shape
    kept = tuple(1 if i in ax else n for i, n in enumerate(shape))

    if op == "sum":
        out = t.data.sum(axis=ax, keepdims=keepdims)
        vjp = lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),)
    elif op == "mean":
        n = 1
        for i in ax:
            n *= shape[i]
        out = t.data.mean(axis=ax, keepdims=keepdims)
        vjp = lambda g: (np.broadcast_to(g.reshape(kept) / n, shape).copy(),)
    elif op == "max":
        if any(shape[i] == 0 for i in ax):
            raise DimensionError("max over an empty axis")
        rest = tuple(i for i in range(t.ndim) if i not in ax)
        perm = rest + ax
        moved = t.data.transpose(perm)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        # argmax returns the first occurrence: lowest flat index wins ties
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        out = out.reshape(kept) if keepdims else out

        def vjp(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
            inv = np.argsort(perm)
            return (gflat.reshape(moved.shape).transpose(inv),)
    else:
        raise ContractError(f"unknown reduction {op!r}")
    return _make(np.asarray(out, dtype=np.float64), op, (t,), vjp)


def sum(t, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", t, axes, keepdims)


def mean(t, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", t, axes, keepdims)


def max(t, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("max", t, axes, keepdims)


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast"
        ) from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, "matmul", (a, b), vjp)


def softmax_attention(q, k, v) -> Tensor:
    """``softmax(q k^T / sqrt(d_h)) v`` over the last two axes."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if (
        q.ndim < 2
        or q.shape[:-2] != k.shape[:-2]
        or k.shape[:-2] != v.shape[:-2]
        or q.shape[-1] != k.shape[-1]
        or k.shape[-2] != v.shape[-2]
    ):
        raise DimensionError(
            f"softmax_attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}"
        )
    scale = 1.0 / math.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    s = (qd @ np.swapaxes(kd, -1, -2)) * scale
    s = s - s.max(axis=-1, keepdims=True)
    w = np.exp(s)
    w /= w.sum(axis=-1, keepdims=True)
    out = w @ vd

    def vjp(g):
        gv = np.swapaxes(w, -1, -2) @ g
        gw = g @ np.swapaxes(vd, -1, -2)
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kd
        gk = np.swapaxes(gs, -1, -2) @ qd
        return gq, gk, gv

    return _make(out, "softmax_attention", (q, k, v), vjp)


def attention_weights(q, k) -> np.ndarray:
    """The row-stochastic attention matrix, for inspection only."""
    qd, kd = as_tensor(q).data, as_tensor(k).data
    s = (qd @ np.swapaxes(kd, -1, -2)) / math.sqrt(qd.shape[-1])
    s = s - s.max(axis=-1, keepdims=True)
    w = np.exp(s)
    return w / w.sum(axis=-1, keepdims=True)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift.

    Fused for speed; it is gradient-checked like every other primitive.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last dim {d}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def vjp(g):
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(xd.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, "layer_norm", (x, gamma, beta), vjp)


# ------------------------------------------------------------ shape plumbing


def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    src = t.shape
    try:
        out = t.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _make(out, "reshape", (t,), lambda g: (g.reshape(src),))


def transpose(t, axes=None) -> Tensor:
    t = as_tensor(t)
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    axes = tuple(axes)
    if sorted(a % t.ndim for a in axes) != list(range(t.ndim)):
        raise DimensionError(f"invalid permutation {axes} for a {t.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return _make(t.data.transpose(axes), "transpose", (t,), lambda g: (g.transpose(inv),))


def _getitem(t: Tensor, index) -> Tensor:
    src = t.shape
    out = t.data[index]

    def vjp(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), "getitem", (t,), vjp)


# ------------------------------------------------------------------ backward


def _collect(loss: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        out.append(t)
        stack.extend(p for p in t.node.parents if p.requires_grad)
    out.sort(key=lambda t: t.node.seq, reverse=True)
    return out


def _run(loss: Tensor, sink: Callable[[Tensor, np.ndarray], None], retain_graph: bool) -> None:
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _collect(loss)
    for t in order:
        if t.node.consumed:
            raise GraphStateError(
                "graph already consumed by a previous backward; "
                "rebuild it or pass retain_graph=True"
            )
    if loss.node is None:
        if loss.requires_grad:
            sink(loss, np.ones(loss.shape))
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for t in order:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        grads = node.vjp(g)
        for p, pg in zip(node.parents, grads):
            if not p.requires_grad or pg is None:
                continue
            if p.node is None:
                sink(p, pg)
            else:
                key = id(p)
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg
    if not retain_graph:
        for t in order:
            t.node.consumed = True
            t.node.vjp = None


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate ``dloss/dleaf`` into ``.grad`` of every reachable leaf.

    Leaves that no path connects to ``loss`` are left untouched (their grad
    stays ``None``, i.e. zero).  A second call on the same graph raises
    :class:`GraphStateError` unless the first used ``retain_graph=True``.
    """

    def sink(leaf: Tensor, g: np.ndarray) -> None:
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    _run(loss, sink, retain_graph)


def grad(loss: Tensor, inputs: Sequence[Tensor], retain_graph: bool = False) -> list[np.ndarray]:
    """Return ``dloss/dinput`` for each leaf in ``inputs`` without touching ``.grad``.

    Unreachable inputs get an exact zero array.
    """
    acc: dict[int, np.ndarray] = {}

    def sink(leaf: Tensor, g: np.ndarray) -> None:
        key = id(leaf)
        acc[key] = g.copy() if key not in acc else acc[key] + g

    _run(loss, sink, retain_graph)
    return [acc.get(id(x), np.zeros(x.shape)) for x in inputs]


def parameters_norm(params: Iterable[Tensor]) -> float:
    """Global L2 norm of the stored gradients (``None`` counts as zero)."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)
