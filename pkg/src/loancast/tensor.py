"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op returns a fresh array (outputs never alias inputs) and
attaches a :class:`Node` holding its inputs and a backward rule. Calling
:meth:`Tensor.backward` on a scalar collects the reachable nodes into a
:class:`Tape` in topological order and replays the rules in reverse.

Broadcasting follows numpy's rules; the gradient of a broadcast operand is
summed back over the expanded axes. Gradients accumulate into ``.grad`` across
backward calls until :meth:`Tensor.zero_grad` is called.
"""
import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("inputs", "backward")

    def __init__(self, inputs, backward):
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        elif isinstance(data, np.generic):
            # numpy ops on 0-d arrays return scalars; keep their dtype
            data = np.asarray(data)
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype, copy=True) if not isinstance(data, np.ndarray) or data.dtype != dtype else data
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    def backward(self, grad=None):
        backward(self, grad)

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", other, self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", other, self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __neg__(self):
        return _op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if not np.isscalar(p):
            raise ContractError("only scalar exponents are supported")
        x = self.data
        return _op(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    # reductions and shape ----------------------------------------------
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

    def exp(self):
        y = np.exp(self.data)
        return _op(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return _op(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        y = np.sqrt(self.data)
        return _op(y, (self,), lambda g: (g * 0.5 / y,))


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _op(data, parents, backward):
    """Wrap ``data`` as an op output and record its backward rule if needed."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(parents, backward)
    return out


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def elementwise(kind, a, b):
    """Binary elementwise op: ``add``, ``sub``, ``mul`` (alias ``hadamard``) or ``div``.

    ``b`` may be a scalar or any numpy-broadcastable tensor; a plain number or
    array operand takes the dtype of the tensor operand.
    """
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a), dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b), dtype=a.dtype)
    x, y = a.data, b.data
    try:
        shape = np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} with {y.shape}") from None
    del shape
    if kind == "add":
        return _op(x + y, (a, b), lambda g: (unbroadcast(g, x.shape), unbroadcast(g, y.shape)))
    if kind == "sub":
        return _op(x - y, (a, b), lambda g: (unbroadcast(g, x.shape), unbroadcast(-g, y.shape)))
    if kind in ("mul", "hadamard"):
        return _op(x * y, (a, b), lambda g: (unbroadcast(g * y, x.shape), unbroadcast(g * x, y.shape)))
    if kind == "div":
        return _op(x / y, (a, b), lambda g: (unbroadcast(g / y, x.shape), unbroadcast(-g * x / (y * y), y.shape)))
    raise ContractError(f"unknown elementwise op {kind!r}")


def matmul(a, b):
    x, y = a.data, b.data
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise DimensionError(f"matmul shapes {x.shape} and {y.shape} do not agree")
    return _op(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def matmul_1x1conv(x, weight, bias=None):
    """Kernel-size-1 convolution over feature vectors: ``x @ weight.T + bias``.

    ``x`` is ``N x C_in``, ``weight`` is ``C_out x C_in`` and ``bias`` ``C_out``.
    """
    xd, w = x.data, weight.data
    if xd.ndim != 2 or w.ndim != 2 or xd.shape[1] != w.shape[1]:
        raise DimensionError(f"input {xd.shape} does not match weight {w.shape}")
    y = xd @ w.T
    if bias is None:
        return _op(y, (x, weight), lambda g: (g @ w, g.T @ xd))
    if bias.shape != (w.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} != ({w.shape[0]},)")
    return _op(y + bias.data, (x, weight, bias), lambda g: (g @ w, g.T @ xd, g.sum(axis=0)))


def reduce_sum(a, axis=None, keepdims=False):
    x = a.data
    if x.size == 0:
        raise DimensionError("empty reduction")

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _op(np.asarray(x.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def reduce_mean(a, axis=None, keepdims=False):
    x = a.data
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([x.shape[i] for i in axes]))
    if count == 0:
        raise DimensionError("empty reduction")
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    x = a.data
    try:
        y = x.reshape(shape).copy()
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    return _op(y, (a,), lambda g: (g.reshape(x.shape),))


def transpose(a, axes=None):
    x = a.data
    y = np.ascontiguousarray(np.transpose(x, axes))
    inv = None if axes is None else np.argsort(axes)
    return _op(y, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def take(a, index):
    x = a.data
    y = np.array(x[index])

    def bw(g):
        out = np.zeros_like(x)
        np.add.at(out, index, g)
        return (out,)

    return _op(y, (a,), bw)


def concat(tensors, axis=0):
    arrays = [t.data for t in tensors]
    try:
        y = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    splits = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
    return _op(y, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


class Tape:
    """Operations reachable from one output, in topological order."""

    def __init__(self, entries):
        self.entries = entries  # list of (output tensor, node)

    @classmethod
    def record(cls, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append((t, t.node))
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in reversed(t.node.inputs):
                if p.node is not None and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.entries)

    def replay(self, root, seed):
        grads = {id(root): seed}
        for out, node in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            _accumulate(out, g)
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    _accumulate(inp, ig)
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + ig
                else:
                    grads[id(inp)] = ig


def _accumulate(t, g):
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        g = g.reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss, grad=None):
    """Reverse-mode sweep from a scalar ``loss``; accumulates into ``.grad``."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    if loss.node is None:
        _accumulate(loss, seed)
        return
    Tape.record(loss).replay(loss, seed)
