"""Hot inner loops: patch extraction/scatter-add, row softmax, joint histograms.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback.
The numba path is used when numba imports cleanly and the environment
variable ``MOCTEFUSE_DISABLE_NUMBA`` is unset or ``0``.  Both paths are
always importable by name so the benchmark and tests can compare them.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("MOCTEFUSE_DISABLE_NUMBA", "0") in ("", "0")


# -- numpy fallbacks ---------------------------------------------------------

def im2col_numpy(xp, kh, kw, stride):
    """[B,C,Hp,Wp] padded input -> [B, C*kh*kw, Ho*Wo] patch matrix."""
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: [B, C, Ho, Wo, kh, kw]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def col2im_numpy(cols, c, hp, wp, kh, kw, stride):
    """Adjoint of :func:`im2col_numpy`: scatter-add patches into [B,C,Hp,Wp]."""
    b = cols.shape[0]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols6 = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, :, i, j]
    return out


def softmax_lastaxis_numpy(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward_numpy(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def joint_histogram_numpy(a, b, bins):
    """Joint count table of two integer label images with values in [0, bins)."""
    flat = a.ravel().astype(np.int64) * bins + b.ravel().astype(np.int64)
    return np.bincount(flat, minlength=bins * bins).reshape(bins, bins).astype(np.float64)


# -- numba kernels -----------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True)
    def im2col_numba(xp, kh, kw, stride):
        b, c, hp, wp = xp.shape
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        cols = np.empty((b, c * kh * kw, ho * wo), dtype=xp.dtype)
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(ho):
                            yy = y * stride + i
                            base = y * wo
                            for x in range(wo):
                                cols[n, row, base + x] = xp[n, ch, yy, x * stride + j]
        return cols

    @numba.njit(cache=True)
    def col2im_numba(cols, c, hp, wp, kh, kw, stride):
        b = cols.shape[0]
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(ho):
                            yy = y * stride + i
                            base = y * wo
                            for x in range(wo):
                                out[n, ch, yy, x * stride + j] += cols[n, row, base + x]
        return out

    @numba.njit(cache=True)
    def _softmax_rows(x):
        n, k = x.shape
        out = np.empty_like(x)
        for r in range(n):
            m = x[r, 0]
            for j in range(1, k):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(k):
                e = np.exp(x[r, j] - m)
                out[r, j] = e
                s += e
            inv = 1.0 / s
            for j in range(k):
                out[r, j] *= inv
        return out

    @numba.njit(cache=True)
    def _softmax_backward_rows(y, g):
        n, k = y.shape
        out = np.empty_like(y)
        for r in range(n):
            dot = 0.0
            for j in range(k):
                dot += g[r, j] * y[r, j]
            for j in range(k):
                out[r, j] = y[r, j] * (g[r, j] - dot)
        return out

    def softmax_lastaxis_numba(x):
        k = x.shape[-1]
        return _softmax_rows(np.ascontiguousarray(x).reshape(-1, k)).reshape(x.shape)

    def softmax_backward_numba(y, g):
        k = y.shape[-1]
        return _softmax_backward_rows(np.ascontiguousarray(y).reshape(-1, k),
                                      np.ascontiguousarray(g).reshape(-1, k)).reshape(y.shape)

    @numba.njit(cache=True)
    def _joint_histogram_numba(a, b, bins):
        out = np.zeros((bins, bins), dtype=np.float64)
        for k in range(a.size):
            out[a[k], b[k]] += 1.0
        return out

    def joint_histogram_numba(a, b, bins):
        return _joint_histogram_numba(
            np.ascontiguousarray(a.ravel(), dtype=np.int64),
            np.ascontiguousarray(b.ravel(), dtype=np.int64),
            bins,
        )

else:  # pragma: no cover
    im2col_numba = im2col_numpy
    col2im_numba = col2im_numpy
    joint_histogram_numba = joint_histogram_numpy
    softmax_lastaxis_numba = softmax_lastaxis_numpy
    softmax_backward_numba = softmax_backward_numpy


# -- dispatch ----------------------------------------------------------------

def im2col(xp, kh, kw, stride):
    if USE_NUMBA:
        return im2col_numba(np.ascontiguousarray(xp), kh, kw, stride)
    return im2col_numpy(xp, kh, kw, stride)


def col2im(cols, c, hp, wp, kh, kw, stride):
    if USE_NUMBA:
        return col2im_numba(np.ascontiguousarray(cols), c, hp, wp, kh, kw, stride)
    return col2im_numpy(cols, c, hp, wp, kh, kw, stride)


def softmax_lastaxis(x):
    if USE_NUMBA:
        return softmax_lastaxis_numba(x)
    return softmax_lastaxis_numpy(x)


def softmax_backward(y, g):
    if USE_NUMBA:
        return softmax_backward_numba(y, g)
    return softmax_backward_numpy(y, g)


def joint_histogram(a, b, bins=256):
    if USE_NUMBA:
        return joint_histogram_numba(a, b, bins)
    return joint_histogram_numpy(a, b, bins)


def backend():
    return "numba" if USE_NUMBA else "numpy"
