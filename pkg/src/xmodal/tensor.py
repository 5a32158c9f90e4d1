"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor that requires a gradient gets a node id drawn from a single
process-wide counter, so a node's inputs always carry smaller ids than the
node itself and insertion order is a valid topological order.

Broadcasting follows one rule: align shapes on their trailing axes; each
aligned pair of extents must be equal or one of them must be 1; missing
leading axes count as 1. Anything else raises ShapeError.
"""

import itertools
import os
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DomainError, GraphError, ShapeError

LEAKY_SLOPE = 0.01
DEBUG = os.environ.get("XMODAL_DEBUG", "") not in ("", "0")

_ids = itertools.count()


class Node:
    __slots__ = ("kind", "inputs", "backward_fn", "ctx")

    def __init__(self, kind, inputs, backward_fn, ctx=None):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.ctx = ctx


class Tensor:
    """A float64 array that may participate in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None
        self._node = None
        if self.requires_grad:
            self.node_id = next(_ids)
            self._node = Node("leaf", (), None)

    @classmethod
    def _result(cls, data, kind, inputs, backward_fn, ctx=None):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(t.requires_grad for t in inputs)
        out.node_id = None
        out._node = None
        if DEBUG and np.isnan(data).any() and all(np.isfinite(t.data).all() for t in inputs):
            raise AssertionError(f"{kind} produced NaN from finite inputs")
        if out.requires_grad:
            out.node_id = next(_ids)
            out._node = Node(kind, tuple(inputs), backward_fn, ctx)
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ----------------------------------------------------
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

    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, axis, "max", keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise


def unary(a, kind, slope=LEAKY_SLOPE):
    """Elementwise relu / leaky_relu / exp / log / neg / sqrt."""
    a = as_tensor(a)
    x = a.data
    if kind == "relu":
        mask = x > 0
        y = np.where(mask, x, 0.0)
        back = lambda g: (g * mask,)
    elif kind == "leaky_relu":
        y = _kernels.leaky_forward(x, slope)
        back = lambda g: (_kernels.leaky_backward(g, x, slope),)
    elif kind == "exp":
        y = np.exp(x)
        back = lambda g: (g * y,)
    elif kind == "log":
        if (x <= 0).any():
            raise DomainError("log of a non-positive entry")
        y = np.log(x)
        back = lambda g: (g / x,)
    elif kind == "neg":
        y = -x
        back = lambda g: (-g,)
    elif kind == "sqrt":
        if (x < 0).any():
            raise DomainError("sqrt of a negative entry")
        y = np.sqrt(x)
        back = lambda g: (g * 0.5 / y,)
    else:
        raise ValueError(f"unknown unary kind {kind!r}")
    return Tensor._result(y, kind, (a,), back)


def relu(a):
    return unary(a, "relu")


def leaky_relu(a, slope=LEAKY_SLOPE):
    return unary(a, "leaky_relu", slope=slope)


def exp(a):
    return unary(a, "exp")


def log(a):
    return unary(a, "log")


def neg(a):
    return unary(a, "neg")


def sqrt(a):
    return unary(a, "sqrt")


def broadcast_shape(sa, sb):
    out = []
    for i in range(1, max(len(sa), len(sb)) + 1):
        ea = sa[-i] if i <= len(sa) else 1
        eb = sb[-i] if i <= len(sb) else 1
        if ea != eb and ea != 1 and eb != 1:
            raise ShapeError(f"shapes {tuple(sa)} and {tuple(sb)} do not broadcast")
        out.append(max(ea, eb))
    return tuple(reversed(out))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, e in enumerate(shape) if e == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def binary(a, b, kind):
    """Elementwise add / sub / mul / div with trailing-axis broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data
    broadcast_shape(x.shape, y.shape)
    sx, sy = x.shape, y.shape
    if kind == "add":
        z = x + y
        back = lambda g: (_unbroadcast(g, sx), _unbroadcast(g, sy))
    elif kind == "sub":
        z = x - y
        back = lambda g: (_unbroadcast(g, sx), _unbroadcast(-g, sy))
    elif kind == "mul":
        z = x * y
        back = lambda g: (_unbroadcast(g * y, sx), _unbroadcast(g * x, sy))
    elif kind == "div":
        if (y == 0).any():
            raise DomainError("division by zero")
        z = x / y
        back = lambda g: (_unbroadcast(g / y, sx), _unbroadcast(-g * x / (y * y), sy))
    else:
        raise ValueError(f"unknown binary kind {kind!r}")
    return Tensor._result(z, kind, (a, b), back)


def add(a, b):
    return binary(a, b, "add")


def sub(a, b):
    return binary(a, b, "sub")


def mul(a, b):
    return binary(a, b, "mul")


def div(a, b):
    return binary(a, b, "div")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise ShapeError(f"matmul of {x.shape} and {y.shape}")
    def back(g):
        # products for inputs that need no gradient are skipped
        return (g @ y.T if a.requires_grad else None, x.T @ g if b.requires_grad else None)

    return Tensor._result(x @ y, "matmul", (a, b), back)


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return Tensor._result(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Tensor._result(y, "reshape", (a,), lambda g: (g.reshape(old),))


def reduce(a, axis, kind, keepdims=False, return_arg=False):
    """Sum / mean / max along one axis (or all axes when ``axis`` is None).

    Max routes the whole output gradient to the first maximal entry. With
    ``return_arg`` the max reduction also returns its arg indices.
    """
    a = as_tensor(a)
    x = a.data
    if axis is not None:
        if not -x.ndim <= axis < x.ndim:
            raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
        axis = axis % x.ndim
    shape = x.shape

    def expand(g):
        if axis is None:
            return np.reshape(g, (1,) * x.ndim)
        return g if keepdims else np.expand_dims(g, axis)

    arg = None
    if kind == "sum":
        y = x.sum(axis=axis, keepdims=keepdims)
        back = lambda g: (np.broadcast_to(expand(g), shape).copy(),)
    elif kind == "mean":
        count = x.size if axis is None else shape[axis]
        y = x.mean(axis=axis, keepdims=keepdims)
        back = lambda g: (np.broadcast_to(expand(g) / count, shape).copy(),)
    elif kind == "max":
        if axis is None:
            flat = x.reshape(-1)
            arg = np.argmax(flat)
            y = flat[arg:arg + 1].copy()
            if keepdims:
                y = y.reshape((1,) * x.ndim)

            def back(g):
                out = np.zeros(x.size)
                out[arg] = np.reshape(g, -1)[0]
                return (out.reshape(shape),)
        else:
            arg = np.argmax(x, axis=axis)
            karg = np.expand_dims(arg, axis)
            y = np.take_along_axis(x, karg, axis=axis)
            if not keepdims:
                y = np.squeeze(y, axis=axis)

            def back(g):
                out = np.zeros(shape)
                np.put_along_axis(out, karg, expand(g), axis=axis)
                return (out,)
    else:
        raise ValueError(f"unknown reduce kind {kind!r}")
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 0:
        y = y.reshape(1)
    out = Tensor._result(y, kind, (a,), back)
    if return_arg:
        return out, arg
    return out


def concat(a, b, axis):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim:
        raise ShapeError("concat operands differ in rank")
    axis = axis % a.ndim
    for i, (ea, eb) in enumerate(zip(a.shape, b.shape)):
        if i != axis and ea != eb:
            raise ShapeError(f"concat shapes {a.shape} and {b.shape} differ off axis {axis}")
    split = a.shape[axis]
    y = np.concatenate([a.data, b.data], axis=axis)

    def back(g):
        ga, gb = np.split(g, [split], axis=axis)
        return (ga, gb)

    return Tensor._result(y, "concat", (a, b), back)


def gather_rows(a, index):
    """Rows of matrix ``a`` picked by an integer array of any shape."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("gather_rows expects a matrix")
    index = np.asarray(index, dtype=np.int64)
    n_rows, width = a.shape
    flat = np.ascontiguousarray(index.reshape(-1))
    y = a.data[flat].reshape(index.shape + (width,))

    def back(g):
        g2 = np.ascontiguousarray(g.reshape(-1, width))
        return (_kernels.scatter_add_rows(g2, flat, n_rows),)

    return Tensor._result(y, "gather", (a,), back)


def conv2d(x, kernels, stride=1):
    """Cross-correlation (no kernel flip) via patch extraction and matmul.

    ``x`` is C_in x H x W or a batch B x C_in x H x W; ``kernels`` is
    C_out x C_in x kh x kw.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    single = x.ndim == 3
    data = x.data[None] if single else x.data
    w = kernels.data
    if data.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects (B,)C,H,W input and 4-d kernels")
    b, c, h, wd = data.shape
    c_out, c_in, kh, kw = w.shape
    if c_in != c:
        raise ShapeError(f"kernel expects {c_in} channels, input has {c}")
    if kh > h or kw > wd:
        raise ShapeError("kernel larger than input")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(data, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    wmat = w.reshape(c_out, -1)
    y = (cols @ wmat.T).reshape(b, ho, wo, c_out).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y)
    if single:
        y = y[0]

    def back(g):
        g4 = g[None] if single else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ wmat).reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gx = _kernels.col2im(np.ascontiguousarray(dcols), h, wd, stride)
        if single:
            gx = gx[0]
        return (gx, gw)

    return Tensor._result(y, "conv2d", (x, kernels), back)


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Nodes reachable from an output, in insertion (= topological) order.

    Each entry of ``nodes`` is ``(node_id, kind, input_ids)``.
    """

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, output):
        tensors = _reachable(output)
        nodes = []
        for t in sorted(tensors, key=lambda t: t.node_id):
            ids = tuple(i.node_id for i in t._node.inputs if i.requires_grad)
            nodes.append((t.node_id, t._node.kind, ids))
        return cls(nodes)

    def is_acyclic(self):
        return all(all(i < nid for i in ids) for nid, _, ids in self.nodes)


def _reachable(output):
    seen = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if t.node_id in seen:
            continue
        seen[t.node_id] = t
        for inp in t._node.inputs:
            if inp.requires_grad and inp.node_id not in seen:
                stack.append(inp)
    return list(seen.values())


def backward(loss, leaves=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves listed in ``leaves`` that the loss does not reach get a zero
    gradient. Existing ``.grad`` values on reached leaves are replaced.
    """
    if not isinstance(loss, Tensor) or loss._node is None:
        raise GraphError("loss has no recorded graph node")
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = sorted(_reachable(loss), key=lambda t: t.node_id, reverse=True)
    grads = {loss.node_id: np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(t.node_id, None)
        if g is None:
            continue
        node = t._node
        if node.kind == "leaf":
            t.grad = g
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if not inp.requires_grad:
                continue
            prev = grads.get(inp.node_id)
            grads[inp.node_id] = gi if prev is None else prev + gi
    if leaves is not None:
        reached = {t.node_id for t in order}
        for leaf in leaves:
            if leaf.node_id not in reached:
                leaf.grad = np.zeros_like(leaf.data)


def grad_check(f, params, eps=1e-5, coords=None, rng=None):
    """Largest |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a dict of Tensors (same keys as ``params``) to a scalar
    Tensor. ``coords`` optionally caps the number of coordinates probed per
    parameter (drawn from ``rng``); by default every coordinate is checked.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True) for k, v in base.items()}
    loss = f(leaves)
    if loss._node is None:
        analytic = {k: np.zeros_like(v) for k, v in base.items()}
    else:
        backward(loss, leaves=list(leaves.values()))
        analytic = {k: leaves[k].grad for k in base}

    def value(name, flat_index, delta):
        probe = {k: Tensor(v) for k, v in base.items()}
        arr = base[name].copy()
        arr.reshape(-1)[flat_index] += delta
        probe[name] = Tensor(arr)
        return f(probe).item()

    worst = 0.0
    for name, arr in base.items():
        idx = np.arange(arr.size)
        if coords is not None and arr.size > coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(rng.choice(arr.size, coords, replace=False))
        ga = analytic[name].reshape(-1)
        for j in idx:
            fd = (value(name, j, eps) - value(name, j, -eps)) / (2 * eps)
            err = abs(ga[j] - fd) / max(1.0, abs(ga[j]))
            worst = max(worst, err)
    return worst
