"""Illumination-sensitive gate: a ResNet18-style classifier over visible images."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import Conv2d, Linear, Module, param

EPS = 1e-7


@dataclass
class GateConfig:
    widths: tuple = (64, 128, 256, 512)
    blocks: tuple = (2, 2, 2, 2)
    in_channels: int = 3
    input_size: tuple | None = None  # (H, W) resize target; None keeps native size

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.blocks = tuple(int(b) for b in self.blocks)
        if self.input_size is not None:
            self.input_size = tuple(int(s) for s in self.input_size)
        if len(self.widths) != 4 or len(self.blocks) != 4:
            raise ContractError("gate needs four stages")

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["blocks"] = list(self.blocks)
        d["input_size"] = None if self.input_size is None else list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GateProbs:
    p_h: np.ndarray
    p_l: np.ndarray
    label: np.ndarray | None = field(default=None)


class AffineNorm(Module):
    """Per-channel scale and shift standing in for batch norm with frozen statistics."""

    def __init__(self, c, gain=1.0):
        self.gain = param(np.full(c, float(gain)))
        self.bias = param(np.zeros(c))

    def __call__(self, x):
        c = x.shape[1]
        return x * T.reshape(self.gain, (1, c, 1, 1)) + T.reshape(self.bias, (1, c, 1, 1))


class BasicBlock(Module):
    def __init__(self, rng, c_in, c_out, stride):
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.norm1 = AffineNorm(c_out)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, stride=1, padding=1, bias=False)
        # zero gain: every residual branch starts as identity
        self.norm2 = AffineNorm(c_out, gain=0.0)
        if stride != 1 or c_in != c_out:
            self.down = Conv2d(rng, c_in, c_out, 1, stride=stride, padding=0, bias=False)
            self.down_norm = AffineNorm(c_out)
        else:
            self.down = None

    def __call__(self, x):
        h = T.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        skip = x if self.down is None else self.down_norm(self.down(x))
        return T.relu(h + skip)


class IllumGate(Module):
    def __init__(self, cfg=None, seed=0):
        cfg = cfg or GateConfig()
        rng = np.random.default_rng(seed)
        w0 = cfg.widths[0]
        self.conv1 = Conv2d(rng, cfg.in_channels, w0, 7, stride=2, padding=3, bias=False)
        self.norm1 = AffineNorm(w0)
        self.stages = []
        c_in = w0
        for s, (width, n) in enumerate(zip(cfg.widths, cfg.blocks)):
            for k in range(n):
                stride = 2 if (k == 0 and s > 0) else 1
                self.stages.append(BasicBlock(rng, c_in, width, stride))
                c_in = width
        self.fc = Linear(rng, c_in, 1)
        self.cfg = cfg
        self.stage_shapes = []

    def __call__(self, x):
        """x [B,C,H,W] -> logits [B]; records per-stage spatial sizes."""
        if x.shape[-2] < 32 or x.shape[-1] < 32:
            raise ContractError(f"gate input {x.shape[-2:]} below the 32x32 receptive minimum")
        shapes = []
        h = T.relu(self.norm1(self.conv1(x)))
        shapes.append(("conv1", h.shape[-2:]))
        h = T.max_pool2d(h, 3, 2, 1)
        i = 0
        for s, n in enumerate(self.cfg.blocks):
            for _ in range(n):
                h = self.stages[i](h)
                i += 1
            shapes.append((f"conv{s + 2}", h.shape[-2:]))
        pooled = T.mean(h, axis=(2, 3))
        logit = self.fc(pooled)
        shapes.append(("output", (1, 1)))
        self.stage_shapes = shapes
        return T.reshape(logit, (x.shape[0],))


def prepare_input(images, in_channels=3):
    """Stack visible images ([H,W], [H,W,3] or a batch) into [B,C,H,W]."""
    arr = np.asarray(images, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim == 3 and arr.shape[-1] != 3:
        arr = arr[..., None]
    elif arr.ndim == 3:
        arr = arr[None]
    # arr: [B,H,W,ch]
    if arr.shape[-1] == 1 and in_channels == 3:
        arr = np.repeat(arr, 3, axis=-1)
    elif arr.shape[-1] == 3 and in_channels == 1:
        arr = arr @ np.array([0.299, 0.587, 0.114])[:, None]
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def gate_forward(i_vi, gate):
    """Gate probabilities for one visible image or a batch."""
    x = T.Tensor(prepare_input(i_vi, gate.cfg.in_channels))
    with T.no_grad():
        p_h = T.sigmoid(gate(x)).data.copy()
    return GateProbs(p_h=p_h, p_l=1.0 - p_h)


def bce_loss(p_h, y):
    """Mean of -y log(P_H) - (1-y) log(P_L) with P_H clamped to [eps, 1-eps].

    ``p_h`` may be a :class:`GateProbs`, a Tensor or an array.
    """
    if isinstance(p_h, GateProbs):
        p_h = p_h.p_h
    p = T.clip(T.as_tensor(p_h), EPS, 1.0 - EPS)
    y = np.asarray(y, dtype=float)
    loss = -(T.log(p) * y) - T.log(1.0 - p) * (1.0 - y)
    return T.mean(loss)


def bce_with_logits(logit, y):
    return bce_loss(T.sigmoid(logit), y)
