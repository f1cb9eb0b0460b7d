"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float array and remembers the primitive op that produced
it, so any scalar built from tensors can be differentiated with
:func:`backward`.  The primitive set is deliberately small: add/mul, matmul,
1-D convolution, reductions, elementwise nonlinearities, gather (whose adjoint
is a scatter-add), reshape/transpose/concat and slicing.  Float32 is the
working precision; float64 tensors are supported so finite-difference oracles
can run in doubles.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import _kernels


class GraphError(RuntimeError):
    """Raised for structurally or numerically invalid backward passes."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference/sampling path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, like_dtype=None):
    arr = np.asarray(data)
    if arr.dtype == np.float64 and like_dtype is None:
        # Bare python floats/lists default to the working precision.
        arr = arr.astype(np.float32)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(like_dtype or np.float32)
    return arr


class Tensor:
    """A float array plus the tape entry that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._vjp = None

    # -- basic introspection ---------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, vjp):
    """Create an op result; records the tape entry only when grads are live."""
    data = np.asarray(data)  # keeps dtype: f64 graphs stay f64 end to end
    out = Tensor(data)
    if _grad_enabled and any(
        p.requires_grad or p._parents for p in parents if isinstance(p, Tensor)
    ):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _accum(t, g):
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum g down to ``shape`` along the axes numpy broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -----------------------------------------------------------------------------
# primitive ops
# -----------------------------------------------------------------------------


def add(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    data = a.data + b.data

    def vjp(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), vjp)


def mul(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    data = a.data * b.data

    def vjp(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), vjp)


def power(a, p):
    p = float(p)
    data = a.data**p

    def vjp(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _node(data, (a,), vjp)


def matmul(a, b):
    """Matrix product over the last two axes with numpy batch broadcasting."""
    data = np.matmul(a.data, b.data)

    def vjp(g):
        if b.data.ndim == 1:
            raise GraphError("matmul with 1-D operands is not supported")
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _node(data, (a, b), vjp)


def conv1d(x, w, stride=1, pad=0):
    """Cross-correlation of x (B, C_in, T) with w (C_out, C_in, K)."""
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise GraphError("conv1d expects x (B, C, T) and w (Co, Ci, K)")
    if x.data.shape[1] != w.data.shape[1]:
        raise GraphError(
            f"conv1d channel mismatch: x has {x.data.shape[1]}, w has {w.data.shape[1]}"
        )
    t_in = x.data.shape[2]
    kernel = w.data.shape[2]
    dt = np.result_type(x.data.dtype, w.data.dtype)
    xd = np.ascontiguousarray(x.data, dtype=dt)
    wd = np.ascontiguousarray(w.data, dtype=dt)
    data = _kernels.conv1d_fwd(xd, wd, stride, pad)

    def vjp(g):
        g = np.ascontiguousarray(g)
        _accum(x, _kernels.conv1d_bwd_x(g, wd, t_in, stride, pad))
        _accum(w, _kernels.conv1d_bwd_w(g, xd, kernel, stride, pad))

    return _node(data, (x, w), vjp)


def reduce_sum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _node(data, (a,), vjp)


def reduce_mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reduce_max(a, axis):
    """Max along one axis; the gradient routes to the first max position."""
    data = a.data.max(axis=axis)
    idx = np.argmax(a.data, axis=axis)

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(
            buf, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
        )
        _accum(a, buf)

    return _node(data, (a,), vjp)


def gather(a, index, axis=0):
    """Take rows along ``axis``; adjoint is a deterministic scatter-add."""
    index = np.asarray(index)
    data = np.take(a.data, index, axis=axis)

    def vjp(g):
        buf = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(buf, index, g)
        else:
            moved = np.moveaxis(buf, axis, 0)
            np.add.at(moved, index, np.moveaxis(g, axis, 0))
        _accum(a, buf)

    return _node(data, (a,), vjp)


def getitem(a, key):
    data = a.data[key]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data)

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        _accum(a, buf)

    return _node(data, (a,), vjp)


def reshape(a, shape):
    data = a.data.reshape(shape)

    def vjp(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(data, (a,), vjp)


def transpose(a, axes):
    data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def vjp(g):
        _accum(a, np.transpose(g, inv))

    return _node(data, (a,), vjp)


def concat(tensors, axis=0):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _node(data, tuple(tensors), vjp)


def upsample2(a):
    """Nearest-neighbour 2x upsampling of (B, C, T) along time."""
    data = np.repeat(a.data, 2, axis=2)

    def vjp(g):
        b, c, t2 = g.shape
        _accum(a, g.reshape(b, c, t2 // 2, 2).sum(axis=3))

    return _node(data, (a,), vjp)


# -----------------------------------------------------------------------------
# elementwise nonlinearities
# -----------------------------------------------------------------------------

_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a):
    x = a.data
    data, th = _kernels.gelu_fwd(x)

    def vjp(g):
        _accum(a, _kernels.gelu_bwd(g, x, th))

    return _node(data, (a,), vjp)


def groupnorm(a, gamma, beta, groups, eps=1e-5):
    """Fused group normalization over (B, C, T) with learned scale/shift."""
    b, c, t = a.data.shape
    xg = a.data.reshape(b, groups, (c // groups) * t)
    mu = xg.mean(axis=2, keepdims=True)
    centered = xg - mu
    var = np.mean(centered * centered, axis=2, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (centered * ivar).reshape(b, c, t)
    data = xhat * gamma.data.reshape(1, c, 1) + beta.data.reshape(1, c, 1)

    def vjp(g):
        _accum(beta, g.sum(axis=(0, 2)))
        _accum(gamma, (g * xhat).sum(axis=(0, 2)))
        n = (c // groups) * t
        dxhat = (g * gamma.data.reshape(1, c, 1)).reshape(b, groups, n)
        xh = xhat.reshape(b, groups, n)
        # dx = ivar/n * (n*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
        s1 = dxhat.sum(axis=2, keepdims=True)
        s2 = (dxhat * xh).sum(axis=2, keepdims=True)
        dx = (ivar / n) * (n * dxhat - s1 - xh * s2)
        _accum(a, dx.reshape(b, c, t))

    return _node(data, (a, gamma, beta), vjp)


def exp(a):
    data = np.exp(a.data)

    def vjp(g):
        _accum(a, g * data)

    return _node(data, (a,), vjp)


def log(a):
    data = np.log(a.data)

    def vjp(g):
        _accum(a, g / a.data)

    return _node(data, (a,), vjp)


def absolute(a):
    """|x| with a zero subgradient at 0 (np.sign(0) == 0)."""
    data = np.abs(a.data)
    s = np.sign(a.data)

    def vjp(g):
        _accum(a, g * s)

    return _node(data, (a,), vjp)


def rownorm(a, eps=1e-12):
    """L2 norm over the last axis with a bounded gradient at zero residual."""
    norm = np.sqrt(np.sum(a.data * a.data, axis=-1))

    def vjp(g):
        denom = np.maximum(norm, eps)[..., None]
        _accum(a, g[..., None] * a.data / denom)

    return _node(norm, (a,), vjp)


def custom_op(data, parents, vjp):
    """Register an externally computed primitive (used for the FK op)."""
    return _node(data, parents, vjp)


# -----------------------------------------------------------------------------
# backward
# -----------------------------------------------------------------------------


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order, visited


def backward(output, leaves=None):
    """Run reverse mode from a scalar output.

    Returns a dict mapping each requested leaf tensor to its gradient array;
    leaves the output does not reach get zero gradients.  When ``leaves`` is
    omitted, all reachable ``requires_grad`` tensors without parents are
    returned.  Gradients are also left on ``.grad`` of every reachable tensor.
    """
    if output.data.shape != ():
        raise GraphError(
            f"backward needs a scalar output, got shape {output.data.shape}"
        )
    if not np.isfinite(output.data):
        raise GraphError("backward called on a non-finite output value")
    order, visited = _toposort(output)
    for node in order:
        node.grad = None
    output.grad = np.ones((), dtype=output.data.dtype)
    for node in reversed(order):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)
    if leaves is None:
        leaves = [t for t in order if t.requires_grad and not t._parents]
    grads = {}
    for leaf in leaves:
        if id(leaf) in visited and leaf.grad is not None:
            g = leaf.grad
        else:
            g = np.zeros_like(leaf.data)
        if not np.all(np.isfinite(g)):
            raise GraphError(
                f"non-finite gradient for leaf {leaf.name or id(leaf)} "
                "(invalid values in the forward graph)"
            )
        grads[leaf] = g
    return grads
