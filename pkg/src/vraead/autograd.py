"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records a closure that maps the output adjoint to the adjoints of
its parents. ``backward`` walks the graph in reverse topological order and
accumulates (``+=``) into the ``grad`` buffers of leaf tensors; intermediate
adjoints live only for the duration of one backward pass.

Broadcasting is deliberately restricted: binary elementwise ops accept equal
shapes, or a Python number / 0-d tensor on either side. Anything else has to
go through an explicit op (``linear`` for bias rows, ``broadcast_to``).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
SOFTPLUS_CUTOFF = 30.0

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of the op."""


class NumericError(FloatingPointError):
    """Non-finite values where finite ones are required."""


class ContractError(RuntimeError):
    """API misuse: a precondition on call order or state was violated."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) \
            else data.astype(DTYPE, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast_scalar(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary_operands(a, b, opname: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ "
                         "(only scalar broadcasting is supported)")
    return a, b


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def bw(g):
        return _unbroadcast_scalar(g, a.shape), _unbroadcast_scalar(g, b.shape)
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def bw(g):
        return _unbroadcast_scalar(g, a.shape), _unbroadcast_scalar(-g, b.shape)
    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def bw(g):
        ga = _unbroadcast_scalar(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast_scalar(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb
    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast_scalar(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast_scalar(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb
    return _make(out, (a, b), bw)


# -- elementwise unary ------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid_np(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def softplus_np(x: np.ndarray) -> np.ndarray:
    big = x > SOFTPLUS_CUTOFF
    return np.where(big, x, np.log1p(np.exp(np.minimum(x, SOFTPLUS_CUTOFF))))


def softplus(x) -> Tensor:
    """log(1 + exp(x)); returns x itself above the overflow cutoff."""
    x = as_tensor(x)
    y = softplus_np(x.data)
    return _make(y, (x,), lambda g: (g * _sigmoid_np(x.data),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product. 2-D operands, or 3-D with equal leading batch size."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (a.ndim == b.ndim == 2) or (a.ndim == b.ndim == 3 and a.shape[0] == b.shape[0])
    if not ok or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb
    return _make(a.data @ b.data, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """x[..., k] @ weight[k, n] + bias[n]; the bias is added to every row."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    parents = [x, weight]
    out = x.data @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)
    k, n = weight.shape

    def bw(g):
        g2 = g.reshape(-1, n)
        gx = (g @ weight.data.T) if x.requires_grad else None
        gw = x.data.reshape(-1, k).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    return _make(out, parents, bw)


# -- reductions and shape plumbing ------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(np.asarray(out), (x,), bw)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),))


def index(x, idx) -> Tensor:
    """Basic (int/slice) indexing; fancy indexing is not supported."""
    x = as_tensor(x)
    items = idx if isinstance(idx, tuple) else (idx,)
    if not all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in items):
        raise ShapeError("index: only integer and slice indexing is supported")
    out = x.data[idx]
    return _make(np.array(out), (x,), lambda g: (_SliceGrad(idx, g),))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(out, ts, bw)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len({t.shape for t in ts}) != 1:
        raise ShapeError(f"stack: shapes differ {[t.shape for t in ts]}")
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))
    return _make(out, ts, bw)


def broadcast_to(x, shape) -> Tensor:
    """Explicit broadcast (numpy rules); the adjoint is summed back."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {x.shape} -> {shape}") from exc
    lead = len(shape) - x.ndim

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)
    return _make(out, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _make(y, (x,), bw)


def lstm_cell(pre, c_prev) -> Tensor:
    """Fused LSTM cell update.

    ``pre`` holds the gate pre-activations (B, 4H) in order input, forget,
    candidate, output. Returns (B, 2H): new hidden state then new cell state.
    """
    pre, c_prev = as_tensor(pre), as_tensor(c_prev)
    H = c_prev.shape[-1]
    if pre.shape[-1] != 4 * H or pre.shape[:-1] != c_prev.shape[:-1]:
        raise ShapeError(f"lstm_cell: pre-activations {pre.shape} vs cell state {c_prev.shape}")
    p = pre.data
    i = _sigmoid_np(p[..., :H])
    f = _sigmoid_np(p[..., H:2 * H])
    g = np.tanh(p[..., 2 * H:3 * H])
    o = _sigmoid_np(p[..., 3 * H:])
    c = f * c_prev.data + i * g
    tc = np.tanh(c)
    h = o * tc

    def bw(grad):
        gh, gc = grad[..., :H], grad[..., H:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dpre = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev.data * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            gh * tc * o * (1.0 - o),
        ], axis=-1)
        return dpre, dc * f
    return _make(np.concatenate([h, c], axis=-1), (pre, c_prev), bw)


# -- backward pass ----------------------------------------------------------

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
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


class _SliceGrad:
    """Adjoint of an indexing op: scattered into the parent buffer in place.

    Avoids materialising a full-size zero array per slice, which would make
    per-timestep indexing of a (B, T, F) tensor quadratic in T.
    """
    __slots__ = ("idx", "g")

    def __init__(self, idx, g):
        self.idx = idx
        self.g = g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = set()  # buffers created here, safe to update in place
    for node in reversed(_topo_order(loss)):
        key = id(node)
        g = grads.pop(key, None)
        owned.discard(key)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pkey = id(parent)
            buf = grads.get(pkey)
            if isinstance(pg, _SliceGrad):
                if buf is None:
                    buf = np.zeros_like(parent.data)
                    grads[pkey] = buf
                    owned.add(pkey)
                elif pkey not in owned:
                    buf = buf.copy()
                    grads[pkey] = buf
                    owned.add(pkey)
                buf[pg.idx] += pg.g
            elif buf is None:
                grads[pkey] = pg
            elif pkey in owned:
                np.add(buf, pg, out=buf)
            else:
                grads[pkey] = np.asarray(buf + pg)
                owned.add(pkey)


def numerical_grad(f: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` wrt every entry of ``param``."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


LOG_2PI = math.log(2.0 * math.pi)
