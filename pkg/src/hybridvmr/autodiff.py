"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Design constraints, chosen for a desk-scale model where gradient checks matter
more than throughput:

* everything is float64;
* no implicit broadcasting, except that a size-1 tensor (or a Python number)
  may combine with a tensor of any shape;
* the graph is built eagerly and torn down after each training step; a graph
  and its tensors belong to one thread of control.

`backward()` seeds a scalar output with 1.0 and walks the graph once in
reverse topological order, summing gradient contributions wherever a tensor
feeds several consumers.
"""

from __future__ import annotations

import contextlib
import math
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, StateError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the context (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense n-dimensional float64 array, optionally part of a backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

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
    def T(self):
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a size-1 tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return tensor_sum(self, axis)

    def backward(self):
        """Reverse-mode pass from a scalar output.

        Visits each node exactly once in reverse topological order and
        accumulates gradients on every reachable tensor with requires_grad.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # unary conveniences ------------------------------------------------

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)


def _toposort(root: Tensor) -> list:
    """Iterative DFS post-order; recursion would overflow on step-sized graphs."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g.copy() if t.grad is None else t.grad + g


def _as_scalar(arr: np.ndarray) -> np.ndarray:
    return arr.reshape(())


# -- pointwise arithmetic -----------------------------------------------


def _binary(a: Tensor, b, fwd, bwd_a, bwd_b, name: str) -> Tensor:
    """Shared plumbing for add/sub/mul/div.

    `b` may be a Tensor of equal shape, a size-1 Tensor, or a Python number;
    size-1 operands follow the tensor-scalar broadcast rule.
    """
    if not isinstance(b, Tensor):
        if not isinstance(b, (int, float)):
            raise TypeError(f"{name}: unsupported operand type {type(b)!r}")
        c = float(b)
        data = fwd(a.data, c)

        def backward(g):
            _accum(a, bwd_a(g, a.data, c))

        return _node(data, (a,), backward)

    if a.shape == b.shape:
        a_op, b_op = a.data, b.data
    elif b.size == 1:
        a_op, b_op = a.data, _as_scalar(b.data)
    elif a.size == 1:
        a_op, b_op = _as_scalar(a.data), b.data
    else:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not match "
                         "and neither is a scalar")
    data = fwd(a_op, b_op)

    def backward(g):
        ga = bwd_a(g, a_op, b_op)
        gb = bwd_b(g, a_op, b_op)
        if ga.shape != a.shape:
            ga = np.sum(ga).reshape(a.shape) if a.size == 1 else ga.reshape(a.shape)
        if gb.shape != b.shape:
            gb = np.sum(gb).reshape(b.shape) if b.size == 1 else gb.reshape(b.shape)
        _accum(a, ga)
        _accum(b, gb)

    return _node(data, (a, b), backward)


def add(a: Tensor, b) -> Tensor:
    return _binary(a, b,
                   lambda x, y: x + y,
                   lambda g, x, y: g,
                   lambda g, x, y: g,
                   "add")


def sub(a: Tensor, b) -> Tensor:
    return _binary(a, b,
                   lambda x, y: x - y,
                   lambda g, x, y: g,
                   lambda g, x, y: -g,
                   "sub")


def mul(a: Tensor, b) -> Tensor:
    return _binary(a, b,
                   lambda x, y: x * y,
                   lambda g, x, y: g * y,
                   lambda g, x, y: g * x,
                   "mul")


def div(a: Tensor, b) -> Tensor:
    return _binary(a, b,
                   lambda x, y: x / y,
                   lambda g, x, y: g / y,
                   lambda g, x, y: -g * x / (y * y),
                   "div")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _node(-a.data, (a,), backward)


# -- pointwise nonlinearities -------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * s * (1.0 - s))

    return _node(s, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - t * t))

    return _node(t, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def backward(g):
        _accum(a, g * mask)

    return _node(a.data * mask, (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericError("log of a non-positive value")
    data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _node(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)

    def backward(g):
        _accum(a, g * e)

    return _node(e, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was in range."""
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        _accum(a, g * mask)

    return _node(np.clip(a.data, lo, hi), (a,), backward)


# -- linear algebra -----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D x 2-D, 2-D x 1-D, 1-D x 2-D and 1-D x 1-D operands."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    inner_a = a.shape[-1]
    inner_b = b.shape[0]
    if inner_a != inner_b:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    case = (a.ndim, b.ndim)

    def backward(g):
        if case == (2, 2):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
        elif case == (2, 1):
            _accum(a, np.outer(g, b.data))
            _accum(b, a.data.T @ g)
        elif case == (1, 2):
            _accum(a, b.data @ g)
            _accum(b, np.outer(a.data, g))
        else:  # (1, 1) -> 0-d
            _accum(a, g * b.data)
            _accum(b, g * a.data)

    return _node(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got shape {a.shape}")

    def backward(g):
        _accum(a, g.T)

    return _node(a.data.T.copy(), (a,), backward)


def affine_rows(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Apply the affine map row-wise: out[i] = x[i] @ w.T + b.

    x is (n, k), w is (m, k), b is (m,). The per-row bias is part of the op,
    not a broadcast exposed to callers.
    """
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"affine_rows shapes: x {x.shape}, w {w.shape}, b {b.shape}")
    if x.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise ShapeError(f"affine_rows mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    data = x.data @ w.data.T + b.data

    def backward(g):
        _accum(x, g @ w.data)
        _accum(w, g.T @ x.data)
        _accum(b, g.sum(axis=0))

    return _node(data, (x, w, b), backward)


# -- softmax ------------------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction; 1-D input is one row."""
    if a.ndim not in (1, 2):
        raise ShapeError(f"softmax_rows needs a 1-D or 2-D tensor, got {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax_rows input contains non-finite entries")
    x = a.data if a.ndim == 2 else a.data[None, :]
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s2 = e / e.sum(axis=1, keepdims=True)
    s = s2 if a.ndim == 2 else s2[0]

    def backward(g):
        g2 = g if a.ndim == 2 else g[None, :]
        inner = (g2 * s2).sum(axis=1, keepdims=True)
        ga = s2 * (g2 - inner)
        _accum(a, ga if a.ndim == 2 else ga[0])

    return _node(s, (a,), backward)


# -- shape manipulation -------------------------------------------------


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of an empty sequence")
    for p in parts[1:]:
        if p.ndim != parts[0].ndim:
            raise ShapeError(f"concat rank mismatch: {parts[0].shape} vs {p.shape}")
        for ax in range(p.ndim):
            if ax != axis and p.shape[ax] != parts[0].shape[ax]:
                raise ShapeError(f"concat side dimensions differ on axis {ax}: "
                                 f"{parts[0].shape} vs {p.shape}")
    data = np.concatenate([p.data for p in parts], axis=axis)
    extents = [p.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, ext in zip(parts, extents):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + ext)
            _accum(p, g[tuple(index)])
            offset += ext

    return _node(data, tuple(parts), backward)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a (n, d) matrix."""
    if not parts:
        raise ShapeError("stack_rows of an empty sequence")
    for p in parts:
        if p.ndim != 1 or p.shape != parts[0].shape:
            raise ShapeError(f"stack_rows needs equal-length 1-D tensors, got {p.shape}")
    data = np.stack([p.data for p in parts], axis=0)

    def backward(g):
        for i, p in enumerate(parts):
            _accum(p, g[i])

    return _node(data, tuple(parts), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0; backward scatters into the source extent."""
    n = a.shape[0]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_rows [{start}, {stop}) out of range for axis length {n}")
    data = a.data[start:stop].copy()

    def backward(g):
        z = np.zeros_like(a.data)
        z[start:stop] = g
        _accum(a, z)

    return _node(data, (a,), backward)


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a 1-D tensor as n identical rows; backward sums over rows."""
    if v.ndim != 1:
        raise ShapeError(f"tile_rows needs a 1-D tensor, got shape {v.shape}")
    if n < 1:
        raise ShapeError(f"tile_rows needs n >= 1, got {n}")
    data = np.tile(v.data, (n, 1))

    def backward(g):
        _accum(v, g.sum(axis=0))

    return _node(data, (v,), backward)


# -- reductions ---------------------------------------------------------


def tensor_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        data = a.data.sum()

        def backward(g):
            _accum(a, np.full(a.shape, float(g)))

        return _node(data, (a,), backward)

    if not (0 <= axis < a.ndim):
        raise ShapeError(f"sum axis {axis} out of range for shape {a.shape}")
    data = a.data.sum(axis=axis)

    def backward(g):
        _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _node(data, (a,), backward)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over axis 0 (time or word axis) of a 2-D tensor."""
    if a.ndim != 2:
        raise ShapeError(f"mean_rows needs a 2-D tensor, got shape {a.shape}")
    return tensor_sum(a, axis=0) * (1.0 / a.shape[0])


def maxpool_axis(a: Tensor, axis: int):
    """Maximum along an axis; returns (pooled, argmax indices).

    Gradient flows only to the argmax positions; ties break to the lowest
    index, which keeps tests deterministic.
    """
    if not (0 <= axis < a.ndim):
        raise ShapeError(f"maxpool axis {axis} out of range for shape {a.shape}")
    if a.shape[axis] < 1:
        raise ShapeError(f"maxpool over an empty axis in shape {a.shape}")
    idx = a.data.argmax(axis=axis)
    data = a.data.max(axis=axis)

    def backward(g):
        z = np.zeros_like(a.data)
        np.put_along_axis(z, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        _accum(a, z)

    return _node(data, (a,), backward), idx


# -- structured ops -----------------------------------------------------


def conv1d(signal: Tensor, kernel: Tensor, bias) -> Tensor:
    """Same-length 1-D cross-correlation with zero padding of (k-1)/2.

    `bias` may be a size-1 Tensor (learned) or a Python number.
    """
    if signal.ndim != 1 or kernel.ndim != 1:
        raise ShapeError(f"conv1d needs 1-D operands, got {signal.shape} and {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel width must be odd, got {k}")
    pad = (k - 1) // 2
    padded = np.pad(signal.data, pad)
    bias_t = bias if isinstance(bias, Tensor) else None
    bias_val = float(_as_scalar(bias.data)) if bias_t is not None else float(bias)
    data = np.correlate(padded, kernel.data, mode="valid") + bias_val

    def backward(g):
        _accum(signal, np.correlate(np.pad(g, pad), kernel.data[::-1], mode="valid"))
        _accum(kernel, np.correlate(padded, g, mode="valid"))
        if bias_t is not None:
            _accum(bias_t, np.full(bias_t.shape, g.sum()))

    parents = (signal, kernel) if bias_t is None else (signal, kernel, bias_t)
    return _node(data, parents, backward)


def grad_reverse(a: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by -lam."""
    if lam < 0:
        raise ConfigError(f"grad_reverse lambda must be >= 0, got {lam}")

    def backward(g):
        _accum(a, (-lam) * g)

    return _node(a.data, (a,), backward)


def pairwise_sqdist(x: Tensor, y: Tensor) -> Tensor:
    """Matrix of squared euclidean distances between rows of x (m,d) and y (n,d)."""
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"pairwise_sqdist needs (m,d) and (n,d), got {x.shape}, {y.shape}")
    rx = (x.data * x.data).sum(axis=1)
    ry = (y.data * y.data).sum(axis=1)
    data = rx[:, None] + ry[None, :] - 2.0 * (x.data @ y.data.T)

    def backward(g):
        _accum(x, 2.0 * (g.sum(axis=1)[:, None] * x.data - g @ y.data))
        _accum(y, 2.0 * (g.sum(axis=0)[:, None] * y.data - g.T @ x.data))

    return _node(data, (x, y), backward)


# -- parameters and the optimizer ---------------------------------------


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] from the run's generator."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Parameter:
    """Named trainable tensor with its Adam state."""

    __slots__ = ("name", "tensor", "m", "v", "step")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class ModelParams:
    """Registry of all trainable parameters; names are unique."""

    def __init__(self):
        self._by_name: dict[str, Parameter] = {}

    def new(self, name: str, data: np.ndarray) -> Parameter:
        if name in self._by_name:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self._by_name[name] = p
        return p

    def __iter__(self):
        return iter(self._by_name.values())

    def __len__(self):
        return len(self._by_name)

    def __contains__(self, name: str):
        return name in self._by_name

    def get(self, name: str) -> Parameter:
        return self._by_name[name]

    def names(self):
        return list(self._by_name)

    def zero_grads(self):
        for p in self:
            p.tensor.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat dict of every array needed to restore params + optimizer state."""
        out: dict[str, np.ndarray] = {}
        for p in self:
            out[f"param/{p.name}"] = p.tensor.data
            out[f"adam_m/{p.name}"] = p.m
            out[f"adam_v/{p.name}"] = p.v
            out[f"adam_t/{p.name}"] = np.asarray(p.step, dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for p in self:
            try:
                p.tensor.data = np.asarray(arrays[f"param/{p.name}"], dtype=np.float64).copy()
                p.m = np.asarray(arrays[f"adam_m/{p.name}"], dtype=np.float64).copy()
                p.v = np.asarray(arrays[f"adam_v/{p.name}"], dtype=np.float64).copy()
                p.step = int(arrays[f"adam_t/{p.name}"])
            except KeyError as exc:
                raise StateError(f"checkpoint is missing state for parameter {p.name!r}") from exc
            p.tensor.grad = None


def adam_step(params: ModelParams, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update with bias correction; clears gradients afterwards."""
    for p in params:
        g = p.tensor.grad
        if g is None:
            raise StateError(f"parameter {p.name!r} has no gradient; run backward() first")
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.tensor.data = p.tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.tensor.grad = None
