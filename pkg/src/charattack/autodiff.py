"""Small reverse-mode automatic differentiation over numpy arrays.

Only the operations the translation model needs are provided. Every op
records its parents and a closure that maps the output gradient to parent
gradients; ``Tensor.backward`` walks the recorded nodes in reverse creation
order. Inside ``no_grad()`` nothing is recorded, which is how decoding and
batched loss evaluation stay cheap.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shapes."""


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to the Tensor operators

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: np.ndarray | None = None):
        if grad is None:
            if self.size != 1:
                raise GraphError(f"backward from non-scalar node {self.op} with shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {self._id: grad}
        for node in reversed(order):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _topological(root: Tensor) -> list[Tensor]:
    # node ids increase with creation time, so sorting by id is a valid order
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    return [seen[k] for k in sorted(seen)]


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars and raw arrays adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: operands {a.shape} and {b.shape} do not broadcast") from None


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(ad * ad, "square", (a,), lambda g: (2.0 * ad * g,))


# nonlinearities

def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _result(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _result(t, "tanh", (a,), lambda g: (g * (1.0 - t * t),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, "softmax", (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, "log_softmax", (a,), backward)


# linear algebra

def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics: (..., k) @ (k, p) and batched (B, i, k) @ (B, k, p)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        if b.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, "matmul", (a, b), backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), "transpose", (a,),
                   lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


# reductions

def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), "sum", (a,), backward)


def max_pool(a, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the (first) argmax."""
    a = as_tensor(a)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _result(np.squeeze(out, axis), "max_pool", (a,), backward)


# structural

def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic(index)

    def backward(g):
        grad = np.zeros_like(a.data)
        if basic:
            grad[index] = g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _result(a.data[index], "getitem", (a,), backward)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
                s != r for k, (s, r) in enumerate(zip(t.shape, ref)) if k != ax):
            raise ShapeError(f"concat: shapes {[x.shape for x in ts]} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in ts], axis=ax), "concat", tuple(ts), backward)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len({t.shape for t in ts}) != 1:
        raise ShapeError(f"stack: shapes {[t.shape for t in ts]} differ")

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in ts], axis=axis), "stack", tuple(ts), backward)


def embed(table, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; equal to a one-hot matmul, without the one-hot."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embed: ids outside table of {table.shape[0]} rows")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _result(table.data[ids], "embed", (table,), backward)


def pick(a, ids: np.ndarray) -> Tensor:
    """Select ``a[..., ids[...]]`` along the last axis."""
    a = as_tensor(a)
    ids = np.asarray(ids)
    if ids.shape != a.shape[:-1]:
        raise ShapeError(f"pick: index shape {ids.shape} does not match {a.shape[:-1]}")
    idx = ids[..., None]

    def backward(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, g[..., None], axis=-1)
        return (grad,)

    return _result(np.take_along_axis(a.data, idx, axis=-1)[..., 0], "pick", (a,), backward)


def conv_chars(x, weight, bias, width: int) -> Tensor:
    """Valid 1-D convolution along axis 1 of ``x`` (N, L, d).

    ``weight`` is (width * d, f); windows are flattened position-major.
    Returns (N, L - width + 1, f).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    n, length, d = x.shape
    if length < width or weight.shape[0] != width * d:
        raise ShapeError(f"conv_chars: input {x.shape}, width {width}, weight {weight.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(x.data, width, axis=1)
    # (N, L-w+1, d, w) -> (N, L-w+1, w, d)
    cols = np.ascontiguousarray(np.swapaxes(windows, -1, -2)).reshape(n, length - width + 1, width * d)
    out = cols @ weight.data + bias.data
    wd = weight.data

    def backward(g):
        gw = cols.reshape(-1, width * d).T @ g.reshape(-1, g.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        gcols = (g @ wd.T).reshape(n, length - width + 1, width, d)
        gx = np.zeros_like(x.data)
        for k in range(width):
            gx[:, k:k + length - width + 1] += gcols[:, :, k]
        return gx, gw, gb

    return _result(out, "conv_chars", (x, weight, bias), backward)


class Graph:
    """A recorded computation with named inputs.

    ``fn`` receives the inputs as Tensors (keyword arguments) and returns the
    output Tensor. ``forward`` runs it and keeps the recording; ``backward``
    differentiates a scalar output with respect to every named input.
    """

    def __init__(self, fn: Callable[..., Tensor], input_shapes: dict[str, tuple] | None = None):
        self.fn = fn
        self.input_shapes = input_shapes
        self._inputs: dict[str, Tensor] | None = None
        self._output: Tensor | None = None

    def forward(self, **inputs) -> np.ndarray:
        if self.input_shapes is not None:
            missing = set(self.input_shapes) - set(inputs)
            if missing:
                raise GraphError(f"unbound inputs: {sorted(missing)}")
            for name, shape in self.input_shapes.items():
                got = np.shape(inputs[name])
                if tuple(got) != tuple(shape):
                    raise ShapeError(f"input {name!r}: expected shape {tuple(shape)}, got {got}")
        leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, op=k)
                  for k, v in inputs.items()}
        out = self.fn(**leaves)
        self._inputs, self._output = leaves, out
        return out.data

    def backward(self) -> dict[str, np.ndarray]:
        if self._output is None:
            raise GraphError("backward called before forward")
        if self._output.size != 1:
            raise GraphError(f"backward needs a scalar output, got shape {self._output.shape}")
        for leaf in self._inputs.values():
            leaf.grad = None
        self._output.backward()
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.data))
                for k, v in self._inputs.items()}


def finite_diff_check(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5,
                      coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between the analytic and central-difference gradient of ``f``.

    ``coords`` limits the check to that many randomly sampled coordinates.
    """
    x = np.array(x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise GraphError("finite_diff_check needs a scalar function")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite function value")
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)

    flat = np.arange(x.size)
    if coords is not None and coords < x.size:
        rng = rng or np.random.default_rng(0)
        flat = rng.choice(x.size, size=coords, replace=False)
    worst = 0.0
    with no_grad():
        for k in flat:
            idx = np.unravel_index(k, x.shape)
            xp, xm = x.copy(), x.copy()
            xp[idx] += eps
            xm[idx] -= eps
            fp = float(f(Tensor(xp)).data)
            fm = float(f(Tensor(xm)).data)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite function value near coordinate {idx}")
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
