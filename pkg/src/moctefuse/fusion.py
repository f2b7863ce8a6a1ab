"""The fusion generator: modality encoders, HI/LI experts and the gated mixture."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attention import CTFB, HI, LI, WindowSelfAttentionBlock
from .errors import ContractError
from .nn import Conv2d, Module


@dataclass
class FusionConfig:
    channels: int = 16
    depth: int = 2
    window: int = 8
    heads: int = 2
    ffn_ratio: int = 2
    n_rtb: int = 1
    n_rdb: int = 1
    slope: float = 0.2

    def __post_init__(self):
        if self.channels % self.heads:
            raise ContractError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.window < 2:
            raise ContractError("window size must be >= 2")
        if self.depth < 1:
            raise ContractError("ctfb depth must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class FusionOutput:
    i_f: T.Tensor
    i_f_hi: T.Tensor
    i_f_lo: T.Tensor


def to_bhwc(x):
    return T.transpose(x, (0, 2, 3, 1))


def to_bchw(x):
    return T.transpose(x, (0, 3, 1, 2))


class RDB(Module):
    """Residual dense block: three densely connected 3x3 convs, 1x1 fusion, skip."""

    def __init__(self, rng, c, slope=0.2):
        self.convs = [Conv2d(rng, c * (i + 1), c, 3) for i in range(3)]
        self.fuse = Conv2d(rng, 4 * c, c, 1)
        self.slope = slope

    def __call__(self, x):
        feats = [x]
        for conv in self.convs:
            feats.append(T.lrelu(conv(T.concat(feats, axis=1)), self.slope))
        return self.fuse(T.concat(feats, axis=1)) + x


class Encoder(Module):
    """Shallow 3x3 conv + LReLU, windowed transformer blocks, dense blocks."""

    def __init__(self, rng, cfg):
        c = cfg.channels
        self.conv_in = Conv2d(rng, 1, c, 3)
        self.rtbs = [WindowSelfAttentionBlock(rng, c, cfg.window, cfg.heads, cfg.ffn_ratio)
                     for _ in range(cfg.n_rtb)]
        self.rdbs = [RDB(rng, c, cfg.slope) for _ in range(cfg.n_rdb)]
        self.slope = cfg.slope

    def __call__(self, img):
        """img [B,H,W] -> features [B,H,W,C]."""
        x = T.lrelu(self.conv_in(T.reshape(img, (img.shape[0], 1) + img.shape[1:])), self.slope)
        if self.rtbs:
            h = to_bhwc(x)
            for blk in self.rtbs:
                h = blk(h)
            x = to_bchw(h)
        for blk in self.rdbs:
            x = blk(x)
        return to_bhwc(x)


class Reconstructor(Module):
    def __init__(self, rng, c, slope=0.2):
        self.conv1 = Conv2d(rng, c, c, 3)
        self.conv2 = Conv2d(rng, c, c, 3)
        self.out = Conv2d(rng, c, 1, 1, init="xavier")
        self.slope = slope

    def __call__(self, feat):
        """feat [B,H,W,C] -> image [B,H,W] in (0,1)."""
        x = to_bchw(feat)
        x = T.lrelu(self.conv1(x), self.slope)
        x = T.lrelu(self.conv2(x), self.slope)
        y = T.sigmoid(self.out(x))
        return T.reshape(y, (y.shape[0],) + y.shape[2:])


class Expert(Module):
    """A stack of same-chirality CTFBs, a 1x1 merge and its own reconstructor."""

    def __init__(self, rng, cfg, chirality):
        c = cfg.channels
        self.blocks = [CTFB(rng, c, cfg.window, cfg.heads, cfg.ffn_ratio, chirality, shift=bool(k % 2))
                       for k in range(cfg.depth)]
        self.merge = Conv2d(rng, 2 * c, c, 1)
        self.recon = Reconstructor(rng, c, cfg.slope)
        self.chirality = chirality

    def features(self, z_vi, z_ir):
        return expert_forward(z_vi, z_ir, self)

    def __call__(self, z_vi, z_ir):
        return self.recon(self.features(z_vi, z_ir))


def expert_forward(z_vi, z_ir, expert):
    """Chain the expert's CTFBs and merge the two streams to C channels."""
    for blk in expert.blocks:
        z_vi, z_ir = blk(z_vi, z_ir)
    if expert.chirality == HI:
        z_p, z_a = z_vi, z_ir
    else:
        z_p, z_a = z_ir, z_vi
    merged = expert.merge(T.concat([to_bchw(z_p), to_bchw(z_a)], axis=1))
    return to_bhwc(merged)


def reconstruct(feature, recon):
    return recon(feature)


class MoCTEFuse(Module):
    def __init__(self, cfg=None, seed=0):
        cfg = cfg or FusionConfig()
        rng = np.random.default_rng(seed)
        self.enc_ir = Encoder(rng, cfg)
        self.enc_vi = Encoder(rng, cfg)
        self.hi = Expert(rng, cfg, HI)
        self.lo = Expert(rng, cfg, LI)
        self.cfg = cfg

    def encode(self, i_ir, i_vi):
        return encode(i_ir, i_vi, self)

    def __call__(self, i_ir, i_vi, p_h, p_l=None):
        return moctefuse_forward(i_ir, i_vi, p_h, p_l, self)


def _as_batch(img):
    img = T.as_tensor(img)
    if img.ndim == 2:
        img = T.reshape(img, (1,) + img.shape)
    return img


def _pad_amount(n, m):
    return (-n) % m


def encode(i_ir, i_vi, model):
    """Per-modality features [B,H,W,C]; H and W must be multiples of the window."""
    i_ir, i_vi = _as_batch(i_ir), _as_batch(i_vi)
    for name, img in (("ir", i_ir), ("vi", i_vi)):
        lo, hi = float(img.data.min()), float(img.data.max())
        if lo < -0.01 or hi > 1.01:
            raise ContractError(f"{name} image not normalised to [0,1]: range [{lo:.4f}, {hi:.4f}]")
    if i_ir.shape != i_vi.shape:
        raise ContractError(f"ir/vi shapes differ: {i_ir.shape} vs {i_vi.shape}")
    return model.enc_ir(i_ir), model.enc_vi(i_vi)


def _pad_to_window(img, m):
    h, w = img.shape[-2:]
    ph, pw = _pad_amount(h, m), _pad_amount(w, m)
    if not ph and not pw:
        return img
    idx_h = np.pad(np.arange(h), (0, ph), mode="reflect" if ph < h else "symmetric")
    idx_w = np.pad(np.arange(w), (0, pw), mode="reflect" if pw < w else "symmetric")
    return T.index_select(T.index_select(img, -2, idx_h), -1, idx_w)


def _gate_column(p, b):
    p = np.broadcast_to(np.asarray(p, dtype=float).reshape(-1), (b,))
    return p.copy()


def moctefuse_forward(i_ir, i_vi, p_h, p_l, model):
    """Run both experts and blend them with the gate probabilities.

    ``p_h``/``p_l`` are scalars or per-sample arrays; ``p_l`` defaults to
    ``1 - p_h``.  Images are reflect-padded to a window multiple and the
    outputs cropped back.
    """
    i_ir, i_vi = _as_batch(i_ir), _as_batch(i_vi)
    b, h, w = i_ir.shape
    ph = _gate_column(p_h, b)
    pl = 1.0 - ph if p_l is None else _gate_column(p_l, b)
    if np.any(np.abs(ph + pl - 1.0) > 1e-6):
        raise ContractError(f"gate probabilities must sum to 1, got {ph + pl}")
    m = model.cfg.window
    z_ir, z_vi = encode(_pad_to_window(i_ir, m), _pad_to_window(i_vi, m), model)
    out_hi = model.hi(z_vi, z_ir)
    out_lo = model.lo(z_vi, z_ir)
    if out_hi.shape[1:] != (h, w):
        out_hi = out_hi[:, :h, :w]
        out_lo = out_lo[:, :h, :w]
    i_f = out_hi * ph.reshape(b, 1, 1) + out_lo * pl.reshape(b, 1, 1)
    return FusionOutput(i_f, out_hi, out_lo)
