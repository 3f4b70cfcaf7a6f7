"""Dense tensors with a reverse-mode gradient tape.

Values live in numpy arrays; every differentiable operation records a
:class:`Node` holding its parents and a closure mapping the output gradient
to parent gradients.  :func:`backward` walks the recorded graph once in
reverse topological order and then frees it.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special


class TensorError(ValueError):
    """Shape, dtype or argument error raised by a tensor operation."""


class NonFiniteError(TensorError):
    """A forward operation produced NaN or infinity."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, consumed graph)."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextmanager
def no_grad():
    """Evaluate without recording a tape (thread-local)."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


# MAC accounting hook used by the profiler; ``None`` when inactive.
def _mac_sink():
    return getattr(_state, "macs", None)


@contextmanager
def count_macs():
    """Collect multiply-accumulate counts per module scope.

    Yields a dict ``scope -> macs``; the scope stack is maintained by
    :class:`m2hx.nn.Module` calls.
    """
    prev = getattr(_state, "macs", None)
    sink: dict[str, int] = {}
    _state.macs = sink
    _state.scope = [""]
    try:
        yield sink
    finally:
        _state.macs = prev


def push_scope(name: str) -> None:
    if _mac_sink() is not None:
        _state.scope.append(name)


def pop_scope() -> None:
    if _mac_sink() is not None:
        _state.scope.pop()


def add_macs(n: int) -> None:
    sink = _mac_sink()
    if sink is not None:
        key = _state.scope[-1]
        sink[key] = sink.get(key, 0) + int(n)


class Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward

    def __repr__(self) -> str:
        return f"Node({self.op})"


class Tensor:
    """An n-dimensional float array with an optional tape node."""

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "_consumed", "_retain")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
        self.data = np.array(arr, dtype=dtype, copy=True)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor constructed from non-finite values")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name
        self._consumed = False
        self._retain = False

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _check_finite(data: np.ndarray, op: str) -> None:
    # A sum is much cheaper than an elementwise isfinite and catches NaN/inf.
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.add.reduce(data, axis=None)
    if not np.isfinite(total) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}")


# ops whose backward is deliberately corrupted (gradient-suite self test)
_FAULTS: dict[str, float] = {}
_FAULT_HITS: dict[str, int] = {}


@contextmanager
def inject_fault(op: str, factor: float = 1.5):
    """Scale every gradient produced by ``op`` while active.

    Yields a dict whose ``hits`` entry counts the graph nodes that were corrupted.
    """
    _FAULTS[op] = factor
    _FAULT_HITS[op] = 0
    record = {"op": op, "hits": 0}
    try:
        yield record
    finally:
        _FAULTS.pop(op, None)
        record["hits"] = _FAULT_HITS.pop(op, 0)


def _faulty(backward: Callable, factor: float) -> Callable:
    def bw(g):
        return tuple(None if r is None else r * factor for r in backward(g))
    return bw


def make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op result; records a node when any parent needs gradients.

    ``backward(g)`` must return one gradient (or ``None``) per parent.
    """
    _check_finite(data, op)
    if op in _FAULTS:
        backward = _faulty(backward, _FAULTS[op])
        _FAULT_HITS[op] += 1
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    out._retain = False
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.node = Node(op, tuple(parents), backward) if needs else None
    return out


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------
class Tape:
    """Nodes reachable from a loss, in topological order (inputs first)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            if t._consumed:
                raise TapeError("tape already consumed by a previous backward pass")
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires gradients.

    The recorded graph is released afterwards; a second call raises.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if not loss.requires_grad:
        raise TapeError("loss is not on a recorded tape")
    tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        if node is None or t._retain:
            t.grad = g if t.grad is None else t.grad + g
        if node is None:
            continue
        pgs = node.backward(g)
        for p, pg in zip(node.parents, pgs):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
        t.node = None
        t._consumed = True


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------
def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make(out, (a, b), bw, "div")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise NonFiniteError("log of non-positive value")
    return make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    """Square root; the gradient at exactly zero is taken as zero."""
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return make(out, (a,), bw, "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out = np.logaddexp(0.0, ad).astype(ad.dtype, copy=False)
    return make(out, (a,), lambda g: (g * special.expit(ad),), "softplus")


_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    ad = a.data
    cdf = 0.5 * (1.0 + special.erf(ad * _SQRT_HALF))
    out = ad * cdf

    def bw(g):
        return (g * (cdf + ad * _INV_SQRT_2PI * np.exp(-0.5 * ad * ad)),)

    return make(out.astype(ad.dtype, copy=False), (a,), bw, "gelu")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return make(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),), "relu")


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def clip(a: Tensor, lo: float | None, hi: float | None) -> Tensor:
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    return make(out, (a,), lambda g: (g * inside,), "clip")


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise TensorError("dropout in training mode needs a random generator")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def scale_grad(a: Tensor, factor: float) -> Tensor:
    """Identity forward, gradient multiplied by ``factor`` (fault injection)."""
    return make(a.data.copy(), (a,), lambda g: (g * factor,), "scale_grad")


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / n)


def cumsum(a: Tensor, axis: int) -> Tensor:
    out = np.cumsum(a.data, axis=axis)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return make(out, (a,), bw, "cumsum")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise TensorError(f"cannot reshape {old} to {shape}") from exc
    return make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if not axes else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def expand(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = np.broadcast_to(a.data, shape).copy()
    return make(out, (a,), lambda g: (_unbroadcast(g, old),), "expand")


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    out = a.data[idx]
    basic = _is_basic(idx)

    def bw(g):
        z = np.zeros(shape, dtype=dtype)
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return make(np.array(out, copy=True), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([expand_dims(t, axis) for t in tensors], axis)


def expand_dims(a: Tensor, axis: int) -> Tensor:
    shape = list(a.shape)
    axis = axis % (a.ndim + 1)
    shape.insert(axis, 1)
    return reshape(a, tuple(shape))


def flip(a: Tensor, axis: int) -> Tensor:
    return make(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),), "flip")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    add_macs(int(np.prod(out.shape)) * ad.shape[-1])

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``weight`` of shape (d_out, d_in)."""
    if x.shape[-1] != weight.shape[1]:
        raise TensorError(f"linear expects last dim {weight.shape[1]}, got {x.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    add_macs(x2.shape[0] * wd.shape[0] * wd.shape[1])
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[0],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make(out, parents, bw, "linear")


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    z = ad - ad.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    z = ad - ad.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return make(out, (a,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------
def standardize(a: Tensor, axes: tuple, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance over ``axes`` (biased variance)."""
    ad = a.data
    mu = ad.mean(axis=axes, keepdims=True)
    xc = ad - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return make(xhat, (a,), bw, "standardize")


def layer_norm(x: Tensor, weight: Tensor | None, bias: Tensor | None, eps: float = 1e-5) -> Tensor:
    y = standardize(x, (x.ndim - 1,), eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def group_norm(x: Tensor, groups: int, weight: Tensor | None, bias: Tensor | None,
               eps: float = 1e-5) -> Tensor:
    squeeze = x.ndim == 3
    if squeeze:
        x = expand_dims(x, 0)
    n, c = x.shape[:2]
    if c % groups:
        raise TensorError(f"group_norm: {c} channels not divisible by {groups} groups")
    rest = x.shape[2:]
    y = reshape(x, (n, groups, c // groups) + rest)
    y = standardize(y, tuple(range(2, y.ndim)), eps)
    y = reshape(y, (n, c) + rest)
    bshape = (1, c) + (1,) * len(rest)
    if weight is not None:
        y = y * reshape(weight, bshape)
    if bias is not None:
        y = y + reshape(bias, bshape)
    return y[0] if squeeze else y


def normalize(x: Tensor, mode: str = "layer_norm", groups: int | None = None,
              weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Dispatch to ``layer_norm`` or ``group_norm`` (``mode='group_norm'``)."""
    if mode == "layer_norm":
        return layer_norm(x, weight, bias, eps)
    if mode == "group_norm":
        if not groups:
            raise TensorError("group_norm needs a group count")
        return group_norm(x, groups, weight, bias, eps)
    raise TensorError(f"unknown normalisation mode {mode!r}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           groups: int = 1) -> Tensor:
    """Zero-padded 'same' cross-correlation over (N,)C,H,W inputs.

    ``weight`` has shape (C_out, C_in/groups, kh, kw) with odd kh, kw.
    ``groups == C_in == C_out`` is the depthwise case.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = expand_dims(x, 0)
    if x.ndim != 4 or weight.ndim != 4:
        raise TensorError("conv2d expects (N,)C,H,W input and a 4-D kernel")
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if cin % groups or cout % groups or cg != cin // groups:
        raise TensorError(f"conv2d group mismatch: C_in={cin}, kernel {weight.shape}, groups={groups}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise TensorError("conv2d needs odd kernel sides")
    if stride < 1:
        raise TensorError("stride must be positive")
    if kh == 1 and kw == 1 and groups == 1:
        out = _conv1x1(x, weight)
    elif groups == cin and cout == cin:
        out = _conv_depthwise(x, weight)
    elif groups == 1:
        out = _conv_dense(x, weight)
    else:
        cog = cout // groups
        outs = [_conv_dense(x[:, i * cg:(i + 1) * cg], weight[i * cog:(i + 1) * cog]) for i in range(groups)]
        out = concat(outs, 1)
    if bias is not None:
        out = out + reshape(bias, (1, cout, 1, 1))
    if stride > 1:
        out = out[:, :, ::stride, ::stride]
    return out[0] if squeeze else out


def _conv1x1(x: Tensor, weight: Tensor) -> Tensor:
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    xd = x.data.reshape(n, cin, h * w)
    wd = weight.data.reshape(cout, cin)
    out = np.matmul(wd, xd).reshape(n, cout, h, w)
    add_macs(n * cin * cout * h * w)

    def bw(g):
        g3 = g.reshape(n, cout, h * w)
        gx = np.matmul(wd.T, g3).reshape(x.shape) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.einsum("nop,ncp->oc", g3, xd, optimize=True).reshape(weight.shape)
        return gx, gw

    return make(out, (x, weight), bw, "conv1x1")


def _conv_depthwise(x: Tensor, weight: Tensor) -> Tensor:
    n, c, h, w = x.shape
    kh, kw = weight.shape[2:]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    wd = weight.data[:, 0]
    out = np.zeros(x.shape, dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += wd[None, :, i, j, None, None] * xp[:, :, i:i + h, j:j + w]
    add_macs(n * c * h * w * kh * kw)

    def bw(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if gxp is not None:
                    gxp[:, :, i:i + h, j:j + w] += g * wd[None, :, i, j, None, None]
                if gw is not None:
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i:i + h, j:j + w])
        gx = gxp[:, :, ph:ph + h, pw:pw + w] if gxp is not None else None
        return gx, gw

    return make(out, (x, weight), bw, "conv_dw")


def _im2col(xd: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(n, cin, h, w) -> (n, cin*kh*kw, h*w), rows ordered like ``weight.reshape(cout, -1)``."""
    n, cin, h, w = xd.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, cin, kh, kw, h, w), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, cin * kh * kw, h * w)


def _col2im(gcols: np.ndarray, shape: tuple, kh: int, kw: int) -> np.ndarray:
    n, cin, h, w = shape
    ph, pw = kh // 2, kw // 2
    g6 = gcols.reshape(n, cin, kh, kw, h, w)
    gxp = np.zeros((n, cin, h + 2 * ph, w + 2 * pw), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + h, j:j + w] += g6[:, :, i, j]
    return gxp[:, :, ph:ph + h, pw:pw + w]


def _conv_dense(x: Tensor, weight: Tensor) -> Tensor:
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    wd = weight.data.reshape(cout, -1)
    cols = _im2col(x.data, kh, kw)
    out = np.matmul(wd, cols).reshape(n, cout, h, w)
    add_macs(n * h * w * cout * cin * kh * kw)

    def bw(g):
        gw = gx = None
        g3 = g.reshape(n, cout, h * w)
        if weight.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(0).reshape(weight.shape)
        if x.requires_grad:
            gx = _col2im(np.matmul(wd.T, g3), x.shape, kh, kw)
        return gx, gw

    return make(out, (x, weight), bw, "conv2d")


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------
_INTERP_CACHE: dict = {}


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, half-pixel centres."""
    key = (n_in, n_out, np.dtype(dtype).str)
    m = _INTERP_CACHE.get(key)
    if m is None:
        scale = n_in / n_out
        m = np.zeros((n_out, n_in), dtype=dtype)
        for i in range(n_out):
            src = max((i + 0.5) * scale - 0.5, 0.0)
            i0 = min(int(np.floor(src)), n_in - 1)
            i1 = min(i0 + 1, n_in - 1)
            frac = src - i0
            m[i, i0] += 1.0 - frac
            m[i, i1] += frac
        m.setflags(write=False)
        _INTERP_CACHE[key] = m
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor (corners not aligned)."""
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    mh = bilinear_matrix(h, h * factor, x.dtype)
    mw = bilinear_matrix(w, w * factor, x.dtype)
    xd = x.data
    out = np.matmul(np.matmul(mh, xd), mw.T)

    def bw(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return make(out, (x,), bw, "upsample")


def pool2_avg(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise TensorError(f"pool2_avg needs even spatial dims, got {h}x{w}")
    lead = x.shape[:-2]
    y = reshape(x, lead + (h // 2, 2, w // 2, 2))
    return mean(y, (y.ndim - 3, y.ndim - 1))


def avg_pool(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise TensorError(f"avg_pool: {h}x{w} not divisible by {factor}")
    lead = x.shape[:-2]
    y = reshape(x, lead + (h // factor, factor, w // factor, factor))
    return mean(y, (y.ndim - 3, y.ndim - 1))


def resample(x: Tensor, mode: str) -> Tensor:
    """``up2_bilinear`` doubles H and W; ``pool2_avg`` halves them."""
    if mode == "up2_bilinear":
        return upsample_bilinear(x, 2)
    if mode == "pool2_avg":
        return pool2_avg(x)
    raise TensorError(f"unknown resample mode {mode!r}")


def total(ts: Iterable[Tensor]) -> Tensor:
    ts = list(ts)
    out = ts[0]
    for t in ts[1:]:
        out = out + t
    return out
