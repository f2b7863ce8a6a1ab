"""Dense float64 tensors with a dynamic reverse-mode gradient tape.

Every primitive records its inputs and a closure that maps the output
gradient to input gradients.  Nodes carry a creation counter; since a node
is always created after its inputs, sorting the reachable nodes by that
counter gives a valid topological order, and :meth:`Tensor.backward`
walks it once in reverse.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np
from scipy.special import erf

from . import _kernels
from .errors import ContractError, DimensionError

DTYPE = np.float64

_counter = itertools.count()
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._id = next(_counter)
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # -- backward -------------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        # collect reachable nodes
        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in nodes:
                continue
            nodes[t._id] = t
            for p in t._parents:
                if p.requires_grad and p._id not in nodes:
                    stack.append(p)
        grads = {self._id: np.asarray(grad, dtype=DTYPE)}
        for nid in sorted(nodes, reverse=True):
            t = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg

    # -- operator sugar -------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

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
        return transpose(self, axes)

    def abs(self):
        return tabs(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward)


def maximum(a, b):
    """Elementwise max; the gradient goes to ``a`` on ties."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _make(out, (a, b), lambda g: (_unbroadcast(np.where(take_a, g, 0.0), a.shape),
                                         _unbroadcast(np.where(take_a, 0.0, g), b.shape)))


# -- elementwise unary --------------------------------------------------------

def neg(x):
    return _make(-x.data, (x,), lambda g: (-g,))


def power(x, p):
    p = float(p)
    return _make(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def tabs(x):
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clip(x, lo, hi):
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (np.where(inside, g, 0.0),))


def sigmoid(x):
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (np.where(mask, g, 0.0),))


def lrelu(x, slope=0.2):
    mask = x.data > 0
    return _make(np.where(mask, x.data, slope * x.data), (x,),
                 lambda g: (np.where(mask, g, slope * g),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


# -- reductions ----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axis, keepdims) * (1.0 / n)


def l1_norm(x):
    return tsum(tabs(x))


# -- shape ops -----------------------------------------------------------------

def reshape(x, shape):
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x, idx):
    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(out, tensors, backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    return _make(out, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def index_select(x, axis, index):
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    index = np.asarray(index, dtype=np.int64)
    axis = axis % x.ndim
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        gm = np.moveaxis(gx, axis, 0)
        np.add.at(gm, index.ravel(), np.moveaxis(g, tuple(range(axis, axis + index.ndim)),
                                                   tuple(range(index.ndim))).reshape(
                                                       (index.size,) + gm.shape[1:]))
        return (gx,)

    return _make(out, (x,), backward)


def roll(x, shift, axis):
    return _make(np.roll(x.data, shift, axis), (x,), lambda g: (np.roll(g, np.negative(shift), axis),))


def pad2d(x, pad, mode="reflect"):
    """Pad the last two axes by ``pad`` on every side."""
    if pad == 0:
        return x
    h, w = x.shape[-2:]
    if mode == "constant":
        width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
        sl = (Ellipsis, slice(pad, pad + h), slice(pad, pad + w))
        return _make(np.pad(x.data, width), (x,), lambda g: (g[sl],))
    if mode != "reflect":
        raise ValueError(f"unknown pad mode {mode!r}")
    if pad >= min(h, w):
        raise DimensionError(f"reflect pad {pad} too large for extent {(h, w)}")
    ih = np.pad(np.arange(h), pad, mode="reflect")
    iw = np.pad(np.arange(w), pad, mode="reflect")
    return index_select(index_select(x, -2, ih), -1, iw)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from None
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def linear(x, w, b=None):
    """x[..., in] @ w[in, out] + b[out]."""
    y = matmul(x, w) if x.ndim >= 2 else matmul(reshape(x, (1, -1)), w)
    return y if b is None else y + b


def softmax(x, axis=-1):
    """Max-shifted softmax along ``axis``."""
    axis = axis % x.ndim
    last = axis == x.ndim - 1
    xd = x.data if last else np.moveaxis(x.data, axis, -1)
    out = _kernels.softmax_lastaxis(xd)

    def backward(g):
        gd = g if last else np.moveaxis(g, axis, -1)
        gx = _kernels.softmax_backward(out, gd)
        return (gx if last else np.moveaxis(gx, -1, axis),)

    return _make(out if last else np.moveaxis(out, -1, axis), (x,), backward)


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    """Normalise over the last axis, then apply optional affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    n = x.shape[-1]

    def backward(g):
        gmean = g.mean(axis=-1, keepdims=True)
        gxmean = (g * xhat).mean(axis=-1, keepdims=True)
        return (rstd * (g - gmean - xhat * gxmean),)

    y = _make(xhat, (x,), backward)
    if gain is not None:
        if gain.shape[-1] != n:
            raise DimensionError(f"layer_norm gain {gain.shape} vs last extent {n}")
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


# -- convolution and pooling ---------------------------------------------------

def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of x[B,C,H,W] with w[O,C,kh,kw], zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _kernels.im2col(xp, kh, kw, stride)  # [B, CKK, L]
    wm = w.data.reshape(o, -1)
    out = np.matmul(wm, cols).reshape(bsz, o, ho, wo)
    parents = (x, w)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
        parents = (x, w, b)

    def backward(g):
        gm = g.reshape(bsz, o, ho * wo)
        gw = np.einsum("bol,bkl->ok", gm, cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.T, gm)
            gxp = _kernels.col2im(gcols, c, hp, wp, kh, kw, stride)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, backward)


def max_pool2d(x, kernel=3, stride=2, padding=1):
    bsz, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    ho = (hp - kernel) // stride + 1
    wo = (wp - kernel) // stride + 1
    cols = _kernels.im2col(xp.reshape(bsz * c, 1, hp, wp), kernel, kernel, stride)
    # cols: [B*C, k*k, L]
    arg = cols.argmax(axis=1)
    out = np.take_along_axis(cols, arg[:, None, :], axis=1).reshape(bsz, c, ho, wo)

    def backward(g):
        gcols = np.zeros_like(cols)
        np.put_along_axis(gcols, arg[:, None, :], g.reshape(bsz * c, 1, ho * wo), axis=1)
        gxp = _kernels.col2im(gcols, 1, hp, wp, kernel, kernel, stride).reshape(bsz, c, hp, wp)
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return _make(out, (x,), backward)


# -- gradient checking ---------------------------------------------------------

def numerical_grad(f, arrays, h=1e-5, index=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arrays``.

    ``arrays`` are numpy arrays that ``f`` reads; they are perturbed in place.
    ``index`` optionally restricts each array to a list of flat positions.
    """
    grads = []
    for k, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        g = np.zeros(arr.size)
        positions = range(arr.size) if index is None else index[k]
        for i in positions:
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(arr.shape))
    return grads


def rel_error(analytic, numeric, floor=1e-6):
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=DTYPE).ravel()
    n = np.asarray(numeric, dtype=DTYPE).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def gradcheck(fn, inputs, h=1e-5, samples=None, rng=None, weights_seed=0):
    """Compare autodiff against central differences for ``fn(*inputs)``.

    A non-scalar output is contracted with fixed random weights so every
    output element participates.  ``samples`` limits the number of checked
    coordinates per input (chosen with ``rng``).  Returns the max relative
    error over all checked coordinates.
    """
    inputs = list(inputs)
    out = fn(*inputs)
    wrng = np.random.default_rng(weights_seed)
    proj = None if out.size == 1 else wrng.standard_normal(out.shape)

    def scalar(o):
        return o.sum() if proj is None else (o * Tensor(proj)).sum()

    for t in inputs:
        t.grad = None
    scalar(out).backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    index = None
    if samples is not None:
        rng = rng or np.random.default_rng(0)
        index = [rng.choice(t.size, size=min(samples, t.size), replace=False) for t in inputs]

    def f():
        with no_grad():
            return float(scalar(fn(*inputs)).data)

    numeric = numerical_grad(f, [t.data for t in inputs], h=h, index=index)
    worst = 0.0
    for k in range(len(inputs)):
        a, n = analytic[k].ravel(), numeric[k].ravel()
        if index is not None:
            a, n = a[index[k]], n[index[k]]
        worst = max(worst, rel_error(a, n))
    return worst
