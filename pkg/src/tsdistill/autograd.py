"""Dense tensors with tape-based reverse-mode differentiation.

Every op records a node carrying a monotonically increasing sequence number;
``Tensor.backward`` replays the recorded nodes in exact reverse recording
order. The tape is single-use: once a graph has been differentiated its nodes
are released and a second ``backward`` through them raises ``GraphConsumed``.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading

import numpy as np

__all__ = [
    "Tensor", "GraphConsumed", "no_grad", "precision", "default_dtype", "tensor",
    "matmul", "conv1d_same", "layer_norm", "softmax", "log_softmax", "gelu", "dropout",
    "linear_resize", "concat", "stack", "where", "norm", "exp", "log", "sqrt", "tanh",
]

_state = threading.local()
_seq = itertools.count()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors.

    Training runs in float32; finite-difference checks switch to float64.
    """
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class GraphConsumed(RuntimeError):
    pass


class _Node:
    __slots__ = ("seq", "parents", "backward", "name")

    def __init__(self, parents, backward, name):
        self.seq = next(_seq)
        self.parents = parents
        self.backward = backward
        self.name = name


_CONSUMED = object()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    # -- basic introspection -------------------------------------------------
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

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- autodiff --------------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self._node is _CONSUMED:
            raise GraphConsumed("backward called twice on the same graph; re-run the forward pass")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            node = t._node
            if node is _CONSUMED:
                raise GraphConsumed("graph shares nodes with an already differentiated graph")
            if node is None or id(t) in nodes:
                continue
            nodes[id(t)] = t
            stack.extend(p for p in node.parents if p.requires_grad)

        grads = {id(self): grad}
        for t in sorted(nodes.values(), key=lambda t: t._node.seq, reverse=True):
            g = grads.pop(id(t), None)
            node = t._node
            t._node = _CONSUMED
            if g is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = _unbroadcast(pg, p.shape)
                if p._node is None:
                    p.grad = pg.astype(p.dtype, copy=True) if p.grad is None else p.grad + pg
                elif id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        if self._node is None:
            # backward on a leaf: d(self)/d(self)
            self.grad = grad if self.grad is None else self.grad + grad

    # -- operator sugar --------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

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
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data, parents, backward, name):
    parents = tuple(parents)
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(parents, backward, name)
    return out


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def power(a, exponent):
    exponent = float(exponent)
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), backward, "gelu")


def dropout(a, p, training, rng=None):
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(a.shape, dtype=np.float32) >= p).astype(a.dtype) * a.dtype.type(1.0 / (1.0 - p))
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = np.where(cond, a.data, b.data)
    zero = np.zeros((), dtype=out.dtype)
    return _make(out, (a, b), lambda g: (np.where(cond, g, zero), np.where(cond, zero, g)), "where")


# -- reductions and shape ops ---------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    # reductions accumulate in float64
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index):
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(i, (np.ndarray, list)) for i in parts)

    def backward(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward, "stack")


def norm(a, axis=-1, keepdims=False):
    """Euclidean norm; the subgradient at zero is taken as zero."""
    out = np.sqrt(np.sum(a.data.astype(np.float64) ** 2, axis=axis, keepdims=True)).astype(a.dtype)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, gk * a.data / safe, 0.0).astype(a.dtype),)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), backward, "norm")


# -- linear algebra ------------------------------------------------------------------

def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(out, (a, b), backward, "matmul")


def conv1d_same(x, w, b):
    """Length-preserving 1-D cross-correlation.

    x: [B, C_in, T], w: [C_out, C_in, k] with k odd, b: [C_out] -> [B, C_out, T].
    """
    k = w.shape[-1]
    if k % 2 == 0:
        raise ValueError(f"conv1d_same needs an odd kernel size, got {k}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    pad = (k - 1) // 2
    T = x.shape[-1]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)  # [B, C_in, T, k]
    out = np.einsum("bctk,ock->bot", windows, w.data, optimize=True) + b.data[None, :, None]

    def backward(g):
        dw = np.einsum("bot,bctk->ock", g, windows, optimize=True)
        db = g.sum(axis=(0, 2))
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[:, :, j:j + T] += np.einsum("bot,oc->bct", g, w.data[:, :, j], optimize=True)
        return dxp[:, :, pad:pad + T], dw, db

    return _make(out.astype(x.dtype), (x, w, b), backward, "conv1d")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then apply the affine map."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(out.astype(x.dtype), (x, gamma, beta), backward, "layer_norm")


def _check_temperature(temperature):
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")


def softmax(x, temperature=1.0, axis=-1):
    _check_temperature(temperature)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((out * (g - (g * out).sum(axis=axis, keepdims=True))) / temperature,)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x, temperature=1.0, axis=-1):
    _check_temperature(temperature)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return ((g - np.exp(out) * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _make(out, (x,), backward, "log_softmax")


def resize_matrix(n_in, n_out, dtype=np.float64):
    """Interpolation matrix R with ``x @ R`` the endpoint-aligned linear resize."""
    if n_out < 2:
        raise ValueError(f"resize target must be at least 2, got {n_out}")
    if n_in < 2:
        raise ValueError(f"cannot resize a series of length {n_in}")
    pos = np.linspace(0.0, n_in - 1, n_out)
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
    frac = pos - lo
    R = np.zeros((n_in, n_out), dtype=np.float64)
    cols = np.arange(n_out)
    R[lo, cols] += 1.0 - frac
    R[lo + 1, cols] += frac
    return R.astype(dtype)


def resize_array(x, new_len):
    """Plain-numpy version of :func:`linear_resize` along the last axis."""
    x = np.asarray(x)
    n = x.shape[-1]
    if new_len < 2:
        raise ValueError(f"resize target must be at least 2, got {new_len}")
    if n == new_len:
        return x.copy()
    pos = np.linspace(0.0, n - 1, new_len)
    lo = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    frac = (pos - lo).astype(x.dtype)
    a = x[..., lo]
    # a + f*(b - a) is exact when a == b, so constant series stay constant
    return a + frac * (x[..., lo + 1] - a)


def linear_resize(x, new_len):
    if new_len < 2:
        raise ValueError(f"resize target must be at least 2, got {new_len}")
    if x.shape[-1] == new_len:
        return x
    R = resize_matrix(x.shape[-1], new_len, x.dtype)
    return _make(x.data @ R, (x,), lambda g: (g @ R.T,), "linear_resize")
