"""Dense tensors with reverse-mode automatic differentiation.

Everything the codec differentiates runs through this module: a numpy-backed
``Tensor`` carrying an optional gradient, and a dynamic tape rebuilt on every
forward pass. float64 is the default dtype (training); the inference path
re-runs the same ops in float32.

Only two broadcast forms are supported by the elementwise ops: identical
shapes, and one operand of size one. Gradients accumulate additively, so a
second ``backward`` without clearing ``grad`` adds on top of the first.
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager

import numpy as np

# NaN/Inf assertions on every op output; costs a full pass over the data.
CHECK_FINITE = os.environ.get("SOFTVQ_CHECK_FINITE", "") not in ("", "0")

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference paths)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _assert_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {where}")


class Tensor:
    """A dense array plus optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        if CHECK_FINITE:
            _assert_finite(arr, "Tensor()")

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a size-1 tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode pass from a scalar loss.

        Visits the tape in reverse topological order exactly once and adds
        gradient contributions into every participating tensor.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        # leaf grads accumulate across calls; interior grads are per-pass
        for node in topo:
            if node._parents:
                node.grad = None
        _accum(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- reductions / views as methods -------------------------------------

    def sum(self):
        return _reduce(self, np.sum)

    def mean(self):
        return _reduce(self, np.mean)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self.dtype))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _node(data, parents, backward):
    """Create an op output; tape linkage only when a parent needs gradients."""
    if CHECK_FINITE:
        _assert_finite(data, "op output")
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _broadcast_pair(a, b, opname):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} "
                     "(only scalar and same-shape broadcast supported)")


def _unbroadcast(g, shape):
    # reduce a gradient back to a size-1 operand's shape
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if int(np.prod(shape)) == 1 else g.reshape(shape)


# -- elementwise --------------------------------------------------------------

def add(a, b):
    _broadcast_pair(a, b, "add")

    def backward(grad):
        if a.requires_grad:
            _accum(a, _unbroadcast(grad, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(grad, b.shape))

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b):
    _broadcast_pair(a, b, "sub")

    def backward(grad):
        if a.requires_grad:
            _accum(a, _unbroadcast(grad, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-grad, b.shape))

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b):
    _broadcast_pair(a, b, "mul")

    def backward(grad):
        if a.requires_grad:
            _accum(a, _unbroadcast(grad * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(grad * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward)


def scale(a, s):
    s = float(s)

    def backward(grad):
        if a.requires_grad:
            _accum(a, grad * s)

    return _node(a.data * s, (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(grad):
        if a.requires_grad:
            _accum(a, grad * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), backward)


def leaky_relu(a, slope=0.2):
    mask = a.data > 0

    def backward(grad):
        if a.requires_grad:
            _accum(a, grad * np.where(mask, 1.0, slope))

    return _node(np.where(mask, a.data, slope * a.data), (a,), backward)


def sqrt(a):
    y = np.sqrt(a.data)

    def backward(grad):
        if a.requires_grad:
            _accum(a, grad * (0.5 / np.sqrt(a.data)))

    return _node(y, (a,), backward)


def tanh(a):
    y = np.tanh(a.data)

    def backward(grad):
        if a.requires_grad:
            _accum(a, grad * (1.0 - y * y))

    return _node(y, (a,), backward)


# -- softmax family ------------------------------------------------------------

def softmax(a, axis=-1):
    """Row-stochastic along `axis`; computed with max subtraction."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(grad):
        if a.requires_grad:
            _accum(a, (grad - (grad * y).sum(axis=axis, keepdims=True)) * y)

    return _node(y, (a,), backward)


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    sm = np.exp(y)

    def backward(grad):
        if a.requires_grad:
            _accum(a, grad - sm * grad.sum(axis=axis, keepdims=True))

    return _node(y, (a,), backward)


# -- gradient routing ----------------------------------------------------------

def stop_gradient(a):
    """Identity forward; contributes exactly zero gradient to `a`."""
    return Tensor(a.data.copy())


def straight_through(values, path):
    """Forward takes `values` verbatim; backward routes into `path`.

    Equivalent to stop_gradient(values - path) + path without the float
    round-off of actually forming that sum, so the forward output is
    bit-identical to `values`.
    """
    values = np.asarray(values, dtype=path.dtype)
    if values.shape != path.shape:
        raise ShapeError(f"straight_through: {values.shape} vs {path.shape}")

    def backward(grad):
        if path.requires_grad:
            _accum(path, grad)

    return _node(values.copy(), (path,), backward)


# -- linear algebra --------------------------------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def backward(grad):
        if a.requires_grad:
            _accum(a, grad @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ grad)

    return _node(a.data @ b.data, (a, b), backward)


# -- convolutions ------------------------------------------------------------------

def _conv_out_size(h, w, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0 or kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"conv: kernel {kh}x{kw} stride {stride} pad {pad} "
                         f"does not fit input {h}x{w}")
    return oh, ow


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh, ow = _conv_out_size(h, w, kh, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(col), oh, ow


def _col2im(col, x_shape, kh, kw, stride, pad):
    # exact adjoint of _im2col: scatter-add each kernel tap back onto the image
    n, c, h, w = x_shape
    oh, ow = _conv_out_size(h, w, kh, kw, stride, pad)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    col6 = col.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            img[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += col6[:, :, i, j]
    if pad:
        img = img[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(img)


def conv2d(x, w, bias=None, stride=1, pad=0):
    """Cross-correlation with zero padding over NCHW input, FCkk weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d operands, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {cw}")
    col, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(f, -1)
    out = col @ wmat.T
    if bias is not None:
        out = out + bias.data
    y = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(grad):
        g = grad.transpose(0, 2, 3, 1).reshape(-1, f)
        if x.requires_grad:
            _accum(x, _col2im(g @ wmat, x.shape, kh, kw, stride, pad))
        if w.requires_grad:
            _accum(w, (g.T @ col).reshape(w.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=0))

    return _node(np.ascontiguousarray(y), parents, backward)


def conv2d_transpose(y, w, bias=None, stride=1, pad=0, out_hw=None):
    """Adjoint of conv2d with identical weights, stride and padding.

    Maps an N x F x H' x W' tensor back to N x C x H x W. The default
    H = (H' - 1) * stride - 2 * pad + kh is the smallest input conv2d maps
    onto that H'; pass out_hw to target any other compatible input size
    (the rows conv2d never touches stay zero, keeping the map an exact
    adjoint for that size too).
    """
    if y.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d_transpose: need 4-d operands, got {y.shape}, {w.shape}")
    n, f, oh, ow = y.shape
    fw, c, kh, kw = w.shape
    if f != fw:
        raise ShapeError(f"conv2d_transpose: input channels {f} != kernel channels {fw}")
    if out_hw is None:
        h = (oh - 1) * stride - 2 * pad + kh
        wd = (ow - 1) * stride - 2 * pad + kw
    else:
        h, wd = out_hw
    if h <= 0 or wd <= 0:
        raise ShapeError(f"conv2d_transpose: non-positive output {h}x{wd}")
    if _conv_out_size(h, wd, kh, kw, stride, pad) != (oh, ow):
        raise ShapeError(f"conv2d_transpose: output {h}x{wd} inconsistent with input {oh}x{ow}")
    yr = y.data.transpose(0, 2, 3, 1).reshape(-1, f)
    wmat = w.data.reshape(f, -1)
    out = _col2im(yr @ wmat, (n, c, h, wd), kh, kw, stride, pad)
    if bias is not None:
        out = out + bias.data.reshape(1, c, 1, 1)

    parents = (y, w) if bias is None else (y, w, bias)

    def backward(grad):
        gcol, _, _ = _im2col(grad, kh, kw, stride, pad)
        if y.requires_grad:
            gy = (gcol @ wmat.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
            _accum(y, np.ascontiguousarray(gy))
        if w.requires_grad:
            _accum(w, (yr.T @ gcol).reshape(w.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, grad.sum(axis=(0, 2, 3)))

    return _node(out, parents, backward)


# -- shape ops ----------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(int(s) for s in shape)

    def backward(grad):
        if a.requires_grad:
            _accum(a, grad.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward)


def transpose(a, axes=None):
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)

    def backward(grad):
        if a.requires_grad:
            _accum(a, grad.transpose(inv))

    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


# -- reductions -----------------------------------------------------------------

def _reduce(a, fn):
    if fn is np.sum:
        def backward(grad):
            if a.requires_grad:
                _accum(a, np.broadcast_to(grad, a.shape))
        return _node(np.sum(a.data), (a,), backward)

    inv_n = 1.0 / a.data.size

    def backward(grad):
        if a.requires_grad:
            _accum(a, np.broadcast_to(grad * inv_n, a.shape))

    return _node(np.mean(a.data), (a,), backward)


def sq_norm_cols(a):
    """Per-column squared L2 norms of a 2-d tensor: (m, n) -> (n,)."""
    if a.ndim != 2:
        raise ShapeError(f"sq_norm_cols: need a matrix, got {a.shape}")
    out = np.sum(a.data * a.data, axis=0)

    def backward(grad):
        if a.requires_grad:
            _accum(a, 2.0 * a.data * grad[None, :])

    return _node(out, (a,), backward)
