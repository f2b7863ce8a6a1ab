"""Window partitioning, asymmetric cross-attention and the chiral fusion block."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import LayerNorm, Linear, Module, param

HI = "HI"
LI = "LI"


@dataclass
class WindowedTokens:
    windows: T.Tensor  # [B * nW, M*M, C]
    origin_shape: tuple  # (B, H, W, C)
    window_size: int


def window_partition(x, m):
    """[B,H,W,C] (or [H,W,C]) -> WindowedTokens with windows [B*HW/M^2, M^2, C]."""
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    b, h, w, c = x.shape
    if h % m or w % m:
        raise ContractError(f"extent {h}x{w} is not a multiple of window size {m}; pad first")
    t = T.reshape(x, (b, h // m, m, w // m, m, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    t = T.reshape(t, (b * (h // m) * (w // m), m * m, c))
    return WindowedTokens(t, (b, h, w, c), m)


def window_unpartition(wt):
    b, h, w, c = wt.origin_shape
    m = wt.window_size
    t = T.reshape(wt.windows, (b, h // m, w // m, m, m, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (b, h, w, c))


def relative_position_index(m):
    """[M^2, M^2] index into a (2M-1)^2 offset table (Swin convention)."""
    ys, xs = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()])  # [2, M^2]
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    return rel[0] * (2 * m - 1) + rel[1]


def bias_matrix(table, index):
    """Table [(2M-1)^2, heads] -> per-head bias [heads, M^2, M^2]."""
    n = index.shape[0]
    b = T.index_select(table, 0, index.ravel())
    return T.transpose(T.reshape(b, (n, n, table.shape[1])), (2, 0, 1))


def attend(q, k, v, bias, heads, return_weights=False):
    """Scaled dot-product attention over windows.

    q: [N, Tq, C]; k, v: [N, Tk, C]; bias: [heads, Tq, Tk] or None.
    """
    n, tq, c = q.shape
    tk = k.shape[1]
    if c % heads:
        raise DimensionError(f"channels {c} not divisible by heads {heads}")
    d = c // heads
    qh = T.transpose(T.reshape(q, (n, tq, heads, d)), (0, 2, 1, 3))
    kh = T.transpose(T.reshape(k, (n, tk, heads, d)), (0, 2, 3, 1))
    vh = T.transpose(T.reshape(v, (n, tk, heads, d)), (0, 2, 1, 3))
    scores = T.matmul(qh, kh) * (1.0 / np.sqrt(d))
    if bias is not None:
        scores = scores + bias
    weights = T.softmax(scores, axis=-1)
    out = T.reshape(T.transpose(T.matmul(weights, vh), (0, 2, 1, 3)), (n, tq, c))
    return (out, weights) if return_weights else out


class ModalityProjection(Module):
    """Per-modality query/key/value maps, each C x C."""

    def __init__(self, rng, c):
        s = 1.0 / np.sqrt(c)
        self.wq = param(rng.standard_normal((c, c)) * s)
        self.wk = param(rng.standard_normal((c, c)) * s)
        self.wv = param(rng.standard_normal((c, c)) * s)

    def qkv(self, x):
        return T.matmul(x, self.wq), T.matmul(x, self.wk), T.matmul(x, self.wv)


class RelativeBias(Module):
    """Bias tables for one query modality: own-key block and other-key block."""

    def __init__(self, rng, m, heads):
        n = (2 * m - 1) ** 2
        self.own = param(rng.standard_normal((n, heads)) * 0.02)
        self.other = param(rng.standard_normal((n, heads)) * 0.02)
        self.index = relative_position_index(m)

    def matrix(self):
        return T.concat([bias_matrix(self.own, self.index), bias_matrix(self.other, self.index)], axis=-1)


def _check_pair(primary, auxiliary):
    if primary.shape[-1] != auxiliary.shape[-1]:
        raise DimensionError(
            f"channel mismatch between modalities: {primary.shape} vs {auxiliary.shape}")
    if primary.shape != auxiliary.shape:
        raise DimensionError(f"token shape mismatch: {primary.shape} vs {auxiliary.shape}")


def aca(primary, auxiliary, proj_primary, proj_auxiliary, bias, heads, return_weights=False):
    """Asymmetric cross-attention for window tokens [N, M^2, C].

    Queries come from ``primary`` only; keys and values are the primary's
    followed by the auxiliary's along the token axis (2*M^2 keys).
    ``bias`` is a :class:`RelativeBias` (or None for no positional term).
    """
    _check_pair(primary, auxiliary)
    q, kp, vp = proj_primary.qkv(primary)
    _, ka, va = proj_auxiliary.qkv(auxiliary)
    return _aca_from_qkv(q, kp, vp, ka, va, bias, heads, return_weights)


def _aca_from_qkv(q, k_own, v_own, k_other, v_other, bias, heads, return_weights=False):
    k = T.concat([k_own, k_other], axis=1)
    v = T.concat([v_own, v_other], axis=1)
    b = None if bias is None else bias.matrix()
    return attend(q, k, v, b, heads, return_weights)


class FFN(Module):
    def __init__(self, rng, c, ratio=2):
        self.fc1 = Linear(rng, c, ratio * c)
        self.fc2 = Linear(rng, ratio * c, c)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class StreamParams(Module):
    """Everything one modality stream owns inside a fusion block."""

    def __init__(self, rng, c, m, heads, ratio):
        self.lp = Linear(rng, c, c)
        self.ln1 = LayerNorm(c)
        self.proj = ModalityProjection(rng, c)
        self.bias = RelativeBias(rng, m, heads)
        self.ln2 = LayerNorm(c)
        self.ffn = FFN(rng, c, ratio)


class CTFB(Module):
    """Chiral transformer fusion block.

    Parameters live in role slots: ``primary`` and ``auxiliary``.  The
    chirality decides which modality fills the primary slot: visible for
    HI, infrared for LI.  Outputs are always returned in modality order
    ``(z_vi_out, z_ir_out)`` so consecutive blocks chain directly.
    """

    def __init__(self, rng, c, window=8, heads=2, ratio=2, chirality=HI, shift=False):
        if chirality not in (HI, LI):
            raise ValueError(f"chirality must be HI or LI, got {chirality!r}")
        self.primary = StreamParams(rng, c, window, heads, ratio)
        self.auxiliary = StreamParams(rng, c, window, heads, ratio)
        self.c = c
        self.window = window
        self.heads = heads
        self.chirality = chirality
        self.shift = shift

    def __call__(self, z_vi, z_ir, return_aca=False):
        return ctfb_forward(z_vi, z_ir, self, return_aca)


def _to_windows(x, m, shift):
    if shift:
        x = T.roll(x, (-(m // 2), -(m // 2)), (1, 2))
    return window_partition(x, m)


def _from_windows(wt, m, shift):
    x = window_unpartition(wt)
    if shift:
        x = T.roll(x, (m // 2, m // 2), (1, 2))
    return x


def ctfb_forward(z_vi, z_ir, block, return_aca=False):
    """Run both directed branches of a CTFB on [B,H,W,C] features."""
    _check_pair(z_vi, z_ir)
    squeeze = z_vi.ndim == 3
    if squeeze:
        z_vi = T.reshape(z_vi, (1,) + z_vi.shape)
        z_ir = T.reshape(z_ir, (1,) + z_ir.shape)
    if block.chirality == HI:
        z_p, z_a = z_vi, z_ir
    else:
        z_p, z_a = z_ir, z_vi
    sp, sa = block.primary, block.auxiliary
    m, shift = block.window, block.shift

    lp_p = sp.lp(z_p)
    lp_a = sa.lp(z_a)
    wp = _to_windows(sp.ln1(lp_p), m, shift)
    wa = _to_windows(sa.ln1(lp_a), m, shift)
    q_p, k_p, v_p = sp.proj.qkv(wp.windows)
    q_a, k_a, v_a = sa.proj.qkv(wa.windows)
    att_p = _aca_from_qkv(q_p, k_p, v_p, k_a, v_a, sp.bias, block.heads)
    att_a = _aca_from_qkv(q_a, k_a, v_a, k_p, v_p, sa.bias, block.heads)
    aca_p = _from_windows(WindowedTokens(att_p, wp.origin_shape, m), m, shift) + lp_p
    aca_a = _from_windows(WindowedTokens(att_a, wa.origin_shape, m), m, shift) + lp_a
    out_p = sp.ffn(sp.ln2(aca_p)) + aca_p
    out_a = sa.ffn(sa.ln2(aca_a)) + aca_a

    if block.chirality == HI:
        outs, acas = (out_p, out_a), (aca_p, aca_a)
    else:
        outs, acas = (out_a, out_p), (aca_a, aca_p)
    if squeeze:
        outs = tuple(T.reshape(o, o.shape[1:]) for o in outs)
        acas = tuple(T.reshape(o, o.shape[1:]) for o in acas)
    return (outs, acas) if return_aca else outs


class WindowSelfAttentionBlock(Module):
    """Single-modality windowed transformer block with residuals."""

    def __init__(self, rng, c, window=8, heads=2, ratio=2):
        self.ln1 = LayerNorm(c)
        self.proj = ModalityProjection(rng, c)
        self.bias = param(rng.standard_normal(((2 * window - 1) ** 2, heads)) * 0.02)
        self.ln2 = LayerNorm(c)
        self.ffn = FFN(rng, c, ratio)
        self.index = relative_position_index(window)
        self.window = window
        self.heads = heads

    def __call__(self, x):
        wt = window_partition(self.ln1(x), self.window)
        q, k, v = self.proj.qkv(wt.windows)
        att = attend(q, k, v, bias_matrix(self.bias, self.index), self.heads)
        x = window_unpartition(WindowedTokens(att, wt.origin_shape, self.window)) + x
        return self.ffn(self.ln2(x)) + x
