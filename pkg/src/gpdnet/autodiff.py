"""A small reverse-mode automatic differentiation engine on top of numpy.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.  Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates gradients.

Training runs in float32.  The float64 mode (see :func:`precision`) exists so
that finite-difference gradient checks are meaningful.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_default_dtype = np.dtype(np.float32)


def default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires it.

        Leaf gradients accumulate across calls; intermediate gradients are
        overwritten.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _default_dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c_arr = a.data.dtype.type(c)

    def backward(g):
        return (g * c_arr,)

    return _result(a.data * c_arr, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    s = a.data.dtype.type(slope)
    positive = a.data > 0
    out = np.where(positive, a.data, a.data * s)

    def backward(g):
        return (np.where(positive, g, g * s),)

    return _result(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _result(out, (a,), backward)


def row_squared_norm(a: Tensor) -> Tensor:
    """Squared L2 norm of each row of a 2-D tensor."""
    if a.data.ndim != 2:
        raise DimensionError(f"row_squared_norm expects a 2-D tensor, got shape {a.shape}")
    out = np.einsum("ij,ij->i", a.data, a.data)

    def backward(g):
        return (2 * g[:, None] * a.data,)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------- reductions and reshaping

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(sum(a), 1.0 / n)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got shape {a.shape}")

    def backward(g):
        return (g.T,)

    return _result(a.data.T, (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a 2-D tensor."""
    out = a.data[:, start:stop]

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _result(out, (a,), backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Rows of ``a`` selected by an integer index array (repeats allowed)."""
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    out = a.data[index]

    def backward(g):
        return (_scatter_rows(g, index, a.shape),)

    return _result(out, (a,), backward)


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Flat gather: ``a.ravel()[index]`` with the shape of ``index``."""
    index = np.asarray(index, dtype=np.intp)
    flat = a.data.reshape(-1)
    out = flat[index]

    def backward(g):
        acc = np.bincount(index.ravel(), weights=g.ravel(), minlength=flat.size)
        return (acc.astype(a.dtype).reshape(a.shape),)

    return _result(out, (a,), backward)


def _scatter_rows(g: np.ndarray, index: np.ndarray, shape: tuple) -> np.ndarray:
    n = shape[0]
    width = int(np.prod(shape[1:], dtype=np.int64))
    g2 = g.reshape(index.size, width)
    flat = (index.reshape(-1, 1) * width + np.arange(width)).ravel()
    acc = np.bincount(flat, weights=g2.ravel(), minlength=n * width)
    return acc.astype(g.dtype).reshape(shape)


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Each row of ``a`` repeated ``k`` times in place (``np.repeat`` on axis 0)."""
    out = np.repeat(a.data, k, axis=0)

    def backward(g):
        return (g.reshape(a.shape[0], k, *a.shape[1:]).sum(axis=1),)

    return _result(out, (a,), backward)


def low_rank_messages(packed: Tensor, h_src: Tensor, gamma: Tensor, rank: int,
                      f_out: int, f_in: int) -> Tensor:
    """Per-edge message ``gamma * sum_t omega_t * phi_t * (psi_t . h_src)``.

    ``packed`` holds, per edge, the r phi vectors, then the r psi vectors,
    then the r omega scalars.  No per-edge matrix is formed.
    """
    e = packed.shape[0]
    r, fo, fi = rank, f_out, f_in
    if packed.shape[1] != r * (fo + fi + 1):
        raise DimensionError(
            f"packed edge factors have width {packed.shape[1]}, expected {r * (fo + fi + 1)}")
    if h_src.shape != (e, fi) or gamma.shape != (e,):
        raise DimensionError(
            f"low_rank_messages: shapes {packed.shape}, {h_src.shape}, {gamma.shape} disagree")
    p = packed.data
    phi = p[:, :r * fo].reshape(e, r, fo)
    psi = p[:, r * fo:r * (fo + fi)].reshape(e, r, fi)
    omega = p[:, r * (fo + fi):]
    h = h_src.data
    gm = gamma.data[:, None]
    s = np.einsum("erf,ef->er", psi, h)
    c = omega * s * gm
    out = np.einsum("ero,er->eo", phi, c)

    def backward(g):
        dp = np.empty_like(p)
        dp[:, :r * fo] = (c[:, :, None] * g[:, None, :]).reshape(e, r * fo)
        dc = np.einsum("ero,eo->er", phi, g)
        ds = dc * omega * gm
        dp[:, r * fo:r * (fo + fi)] = (ds[:, :, None] * h[:, None, :]).reshape(e, r * fi)
        dp[:, r * (fo + fi):] = dc * s * gm
        dh = np.einsum("er,erf->ef", ds, psi)
        dgamma = (dc * omega * s).sum(axis=1)
        return dp, dh, dgamma

    return _result(out, (packed, h_src, gamma), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------- graph aggregation

def segment_mean(messages: Tensor, targets: np.ndarray, n_points: int) -> Tensor:
    """Average the message rows sharing a target index.

    Targets with no incoming message produce an all-zero row.
    """
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape[0] != messages.shape[0]:
        raise DimensionError(
            f"segment_mean: {messages.shape[0]} messages but {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= n_points):
        raise IndexError(f"segment_mean: target index out of range [0, {n_points})")
    width = messages.shape[1]
    counts = np.bincount(targets, minlength=n_points)

    uniform = (targets.size > 0 and targets.size % n_points == 0
               and np.array_equal(targets, np.repeat(np.arange(n_points), targets.size // n_points)))
    if uniform:
        k = targets.size // n_points
        out = messages.data.reshape(n_points, k, width).mean(axis=1)

        def backward(g):
            return (np.repeat(g / messages.dtype.type(k), k, axis=0),)
    else:
        total = _scatter_rows(messages.data, targets, (n_points, width))
        denom = np.maximum(counts, 1).astype(messages.dtype)[:, None]
        out = total / denom

        def backward(g):
            return ((g / denom)[targets],)

    return _result(out, (messages,), backward)


def batch_norm(x: Tensor, scale_: Tensor, shift: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Per-feature batch normalization over the rows of ``x``.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"batch_norm expects N x F input, got {x.shape}")
    n = x.shape[0]
    dt = x.dtype.type
    if training:
        if n < 2:
            raise ContractError(f"batch_norm: degenerate batch of {n} row(s) in training mode")
        mu = x.data.mean(axis=0)
        centered = x.data - mu
        var = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + dt(eps))
        xhat = centered * inv_std
        running_mean *= momentum
        running_mean += (1 - momentum) * mu.astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1 - momentum) * var.astype(running_var.dtype)

        def backward(g):
            dxhat = g * scale_.data
            dx = inv_std / dt(n) * (dt(n) * dxhat - dxhat.sum(axis=0)
                                     - xhat * (dxhat * xhat).sum(axis=0))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x.data - running_mean.astype(x.dtype)) * inv_std

        def backward(g):
            return g * scale_.data * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0)

    out = xhat * scale_.data + shift.data
    return _result(out, (x, scale_, shift), backward)


# ---------------------------------------------------------------- parameters and optimizer

class ParameterStore:
    """Ordered, named collection of trainable tensors plus non-trainable buffers."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=_default_dtype), requires_grad=True)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value) -> np.ndarray:
        if name in self.buffers:
            raise ContractError(f"duplicate buffer name {name!r}")
        arr = np.array(value, dtype=_default_dtype)
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def num_parameters(self) -> int:
        return int(np.sum([t.data.size for t in self._params.values()]))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype) -> "ParameterStore":
        """Deep copy with every tensor and buffer cast to ``dtype``."""
        other = ParameterStore()
        for name, t in self._params.items():
            other._params[name] = Tensor(t.data.astype(dtype), requires_grad=True)
        for name, b in self.buffers.items():
            other.buffers[name] = b.astype(dtype)
        return other

    def copy(self) -> "ParameterStore":
        return self.astype(next(iter(self._params.values())).dtype if self._params else _default_dtype)


class Adam:
    """Adam with bias correction; gradients are reset to zero after each step."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: OrderedDict[str, np.ndarray] = OrderedDict()
        self.v: OrderedDict[str, np.ndarray] = OrderedDict()

    def step(self, store: ParameterStore) -> None:
        for name, p in store.items():
            if p.grad is None:
                raise ContractError(f"adam_step: parameter {name!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in store.items():
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            dt = p.dtype.type
            m, v = self.m[name], self.v[name]
            m *= dt(b1)
            m += dt(1 - b1) * g
            v *= dt(b2)
            v += dt(1 - b2) * (g * g)
            m_hat = m / dt(c1)
            v_hat = v / dt(c2)
            p.data -= dt(self.lr) * m_hat / (np.sqrt(v_hat) + dt(self.eps))
            p.grad = np.zeros_like(p.data)
