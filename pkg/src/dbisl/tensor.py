"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the dual-task pipeline needs are provided. Broadcasting
is restricted to identical shapes or tensor-vs-scalar (a python number or a
0-d tensor). Every forward op checks its output for NaN/Inf.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

from .errors import (DoubleBackwardUnsupported, EmptyTensor, NonFiniteResult,
                     NotScalar, ShapeMismatch)

_state = threading.local()
_node_ids = itertools.count()

LOG_EPS = 1e-12
DTYPES = {"f32": np.float32, "f64": np.float64}


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def grad_enabled():
    return getattr(_state, "grad", True)


def _record(kind, payload):
    trace = getattr(_state, "trace", None)
    if trace is not None:
        if isinstance(payload, np.ndarray):
            payload = hash(np.packbits(payload).tobytes())
        trace.append((kind, payload))


@contextlib.contextmanager
def record_decisions():
    """Collect every discrete branch taken by forward ops (masks, argmin/argmax).

    Used by the finite-difference harness to detect perturbations that cross
    a non-differentiable point.
    """
    prev = getattr(_state, "trace", None)
    _state.trace = trace = []
    try:
        yield trace
    finally:
        _state.trace = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the element type of newly created tensors."""
    dtype = DTYPES.get(dtype, dtype)
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward",
                 "_id", "_consumed", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else default_dtype()
        self.data = np.array(data, dtype=dtype, order="C", copy=None)
        if self.data.ndim > 5:
            raise ShapeMismatch(f"rank {self.data.ndim} exceeds 5")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._id = next(_node_ids)
        self._consumed = False

    # -- basic properties --------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self):
        return len(self.data)

    # -- operators -----------------------------------------------------------
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

    def __getitem__(self, idx):
        return index(self, idx)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)

    def sum(self):
        return reduce("sum", self)

    def mean(self):
        return reduce("mean", self)

    def min(self):
        return reduce("min", self)

    def max(self):
        return reduce("max", self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def detach(self):
        return detach(self)

    def backward(self):
        backward(self)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def make_node(data, parents, backward_fn, op, check=True):
    """Wrap an op result, recording the tape edge when any parent needs grad."""
    if check and not np.all(np.isfinite(data)):
        raise NonFiniteResult(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._id = next(_node_ids)
    out._consumed = False
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# -- tape --------------------------------------------------------------------
class Tape:
    """Topologically ordered op records reachable from a root tensor."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node._id in seen:
                continue
            seen.add(node._id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p._id not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def is_topological(self):
        pos = {n._id: i for i, n in enumerate(self.nodes)}
        return all(pos[p._id] < pos[n._id]
                   for n in self.nodes for p in n._parents if p._id in pos)


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from scalar ``loss``."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise DoubleBackwardUnsupported("graph already consumed by backward()")
    if not loss.requires_grad:
        raise ValueError("loss is not attached to the tape")
    tape = Tape.from_root(loss)
    grads = {loss._id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node._id, None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._id in grads:
                    grads[p._id] = grads[p._id] + pg
                else:
                    grads[p._id] = pg
        # release saved activations; a second pass over this graph is an error
        node._consumed = True
        node._backward = None
        node._parents = ()
        node.requires_grad = False


# -- elementwise ---------------------------------------------------------------
def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    ref = a if isinstance(a, Tensor) else b
    a = as_tensor(a, like=ref)
    b = as_tensor(b, like=ref)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeMismatch(f"incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _fit(g, shape):
    """Reduce a gradient to the operand's shape (scalar operands sum)."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _fit(g, a.shape), _fit(g, b.shape)
    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _fit(g, a.shape), _fit(-g, b.shape)
    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _fit(g * b.data, a.shape), _fit(g * a.data, b.shape)
    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        gb = -g * out / b.data
        return _fit(g / b.data, a.shape), _fit(gb, b.shape)
    return make_node(out, (a, b), bw, "div")


def neg(a):
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    return make_node(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    if np.any(a.data <= 0):
        raise NonFiniteResult("log of a nonpositive value; clamp to [1e-12, inf) first")
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a):
    x = a.data
    # numerically stable form for both signs
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return make_node(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a):
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def relu(a):
    pos = a.data > 0
    _record("relu", pos)
    return make_node(np.maximum(a.data, 0), (a,), lambda g: (g * pos,), "relu")


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient passes where the input lies inside the range."""
    x = a.data
    out = np.clip(x, lo, hi) if (lo is not None or hi is not None) else x.copy()
    keep = np.ones(x.shape, dtype=bool)
    if lo is not None:
        keep &= x >= lo
    if hi is not None:
        keep &= x <= hi
    _record("clamp", keep)
    return make_node(out.astype(x.dtype, copy=False), (a,), lambda g: (g * keep,), "clamp")


# -- reductions ------------------------------------------------------------------
def reduce(op_kind, a):
    """Full reduction to a 0-d tensor.

    min/max send the whole gradient to the first extremal element in
    row-major order.
    """
    if a.size == 0:
        raise EmptyTensor(f"{op_kind} of an empty tensor")
    x = a.data
    if op_kind == "sum":
        return make_node(np.asarray(x.sum(), dtype=x.dtype), (a,),
                         lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")
    if op_kind == "mean":
        n = x.size
        return make_node(np.asarray(x.mean(), dtype=x.dtype), (a,),
                         lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")
    if op_kind in ("min", "max"):
        flat = x.reshape(-1)
        i = int(np.argmin(flat) if op_kind == "min" else np.argmax(flat))
        _record(op_kind, i)

        def bw(g):
            out = np.zeros(flat.shape, dtype=x.dtype)
            out[i] = g
            return (out.reshape(x.shape),)
        return make_node(np.asarray(flat[i], dtype=x.dtype), (a,), bw, op_kind)
    raise ValueError(f"unknown reduction {op_kind!r}")


def argextreme(a, op_kind):
    """Flat index that ``reduce(op_kind, a)`` routes its gradient to."""
    flat = a.data.reshape(-1)
    return int(np.argmin(flat) if op_kind == "min" else np.argmax(flat))


# -- structure ----------------------------------------------------------------------
def select(mask, a, b):
    """``mask ? a : b`` with a constant (non-differentiable) mask."""
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    ref = a if isinstance(a, Tensor) else b
    a = as_tensor(a, like=ref)
    b = as_tensor(b, like=ref)
    for t in (a, b):
        if t.ndim and t.shape != mask.shape:
            raise ShapeMismatch(f"select operand {t.shape} vs mask {mask.shape}")
    _record("select", mask)
    out = np.where(mask, a.data, b.data).astype(ref.dtype, copy=False)
    if out.shape != mask.shape:
        out = np.broadcast_to(out, mask.shape).copy()

    def bw(g):
        return _fit(np.where(mask, g, 0), a.shape), _fit(np.where(mask, 0, g), b.shape)
    return make_node(out, (a, b), bw, "select")


def detach(a):
    return Tensor(a.data.copy(), requires_grad=False)


def reshape(a, shape):
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),),
                     "reshape", check=False)


def index(a, idx):
    out = np.array(a.data[idx], order="C")

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g) if _is_fancy(idx) else full.__setitem__(idx, g)
        return (full,)
    return make_node(out, (a,), bw, "index", check=False)


def _is_fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def stack(tensors, axis=0):
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatch(f"stack of differing shapes {shapes}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return make_node(out, tensors, bw, "stack", check=False)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))
    return make_node(out, tensors, bw, "concat", check=False)


def mse(a, b):
    """Mean squared error between two same-shaped tensors."""
    d = sub(a, b)
    return reduce("mean", square(d))
