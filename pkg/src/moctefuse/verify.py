"""Finite-difference and analytic gradient suites used by ``moctefuse gradcheck``."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import CTFB, HI
from .fusion import FusionConfig, MoCTEFuse
from .losses import competitive_loss, fusion_objective, verify_competitive_gradient

PRIMITIVE_TOL = 1e-5
BLOCK_TOL = 1e-4
COMPETITIVE_TOL = 1e-8


def _leaf(rng, shape, low=None):
    x = rng.standard_normal(shape)
    if low is not None:
        # keep clear of non-smooth points at 0
        x = np.sign(x) * (np.abs(x) + low)
    return T.Tensor(x, requires_grad=True)


def primitive_cases(rng):
    """(name, fn, inputs) triples covering every differentiable primitive."""
    L = _leaf
    a34, b42 = L(rng, (3, 4)), L(rng, (4, 2))
    yield "matmul", T.matmul, [a34, b42]
    yield "matmul_batched", T.matmul, [L(rng, (2, 3, 4)), L(rng, (4, 5))]
    yield "softmax", lambda x: T.softmax(x, axis=-1), [L(rng, (3, 5))]
    yield "softmax_axis0", lambda x: T.softmax(x, axis=0), [L(rng, (4, 3))]
    yield "conv2d", lambda x, w, b: T.conv2d(x, w, b, 1, 1), [L(rng, (2, 2, 5, 5)), L(rng, (3, 2, 3, 3)), L(rng, (3,))]
    yield "conv2d_stride2", lambda x, w: T.conv2d(x, w, None, 2, 1), [L(rng, (1, 2, 6, 6)), L(rng, (2, 2, 3, 3))]
    yield "layer_norm", lambda x, g, b: T.layer_norm(x, g, b), [L(rng, (4, 8)), L(rng, (8,)), L(rng, (8,))]
    yield "gelu", T.gelu, [L(rng, (4, 5))]
    yield "lrelu", lambda x: T.lrelu(x, 0.2), [L(rng, (4, 5), low=0.1)]
    yield "relu", T.relu, [L(rng, (4, 5), low=0.1)]
    yield "sigmoid", T.sigmoid, [L(rng, (4, 5))]
    yield "add", T.add, [L(rng, (3, 4)), L(rng, (4,))]
    yield "sub", T.sub, [L(rng, (3, 4)), L(rng, (3, 1))]
    yield "mul", T.mul, [L(rng, (3, 4)), L(rng, (3, 4))]
    yield "div", T.div, [L(rng, (3, 4)), L(rng, (3, 4), low=0.5)]
    yield "abs", T.tabs, [L(rng, (3, 4), low=0.1)]
    x, y = rng.standard_normal((2, 3, 4))
    y = np.where(np.abs(x - y) < 0.1, y + 0.3, y)
    yield "maximum", T.maximum, [T.Tensor(x, requires_grad=True), T.Tensor(y, requires_grad=True)]
    yield "mean", lambda x: T.mean(x, axis=1), [L(rng, (3, 4))]
    yield "sum", lambda x: T.tsum(x, axis=(0, 2), keepdims=True), [L(rng, (2, 3, 4))]
    yield "mean_abs", lambda x: T.mean(T.tabs(x)), [L(rng, (3, 4), low=0.1)]
    yield "l1_norm", T.l1_norm, [L(rng, (3, 4), low=0.1)]
    yield "exp", T.exp, [L(rng, (3, 4))]
    yield "log", T.log, [T.Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)]
    yield "sqrt", T.sqrt, [T.Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)]
    yield "power", lambda x: x ** 3, [L(rng, (3, 4))]
    yield "reshape_transpose", lambda x: T.transpose(T.reshape(x, (4, 3, 2)), (2, 0, 1)), [L(rng, (6, 4))]
    yield "getitem", lambda x: x[:, 1:3], [L(rng, (3, 4))]
    yield "concat", lambda a, b: T.concat([a, b], axis=1), [L(rng, (2, 3)), L(rng, (2, 2))]
    yield "stack", lambda a, b: T.stack([a, b], axis=-1), [L(rng, (2, 3)), L(rng, (2, 3))]
    yield "index_select", lambda x: T.index_select(x, 0, np.array([[0, 2], [2, 1]])), [L(rng, (3, 4))]
    yield "pad_reflect", lambda x: T.pad2d(x, 1, "reflect"), [L(rng, (1, 2, 4, 5))]
    yield "roll", lambda x: T.roll(x, (1, -2), (0, 1)), [L(rng, (3, 4))]
    yield "max_pool2d", lambda x: T.max_pool2d(x, 3, 2, 1), [L(rng, (1, 2, 6, 6))]
    # values at least 0.1 away from the clip bounds at +-0.5
    mag = rng.choice([0.2, 0.8], (3, 4)) + rng.uniform(-0.1, 0.1, (3, 4))
    yield "clip", lambda x: T.clip(x, -0.5, 0.5), [T.Tensor(rng.choice([-1.0, 1.0], (3, 4)) * mag, requires_grad=True)]


def check_primitives(seed=0):
    rng = np.random.default_rng(seed)
    return {name: T.gradcheck(fn, inputs) for name, fn, inputs in primitive_cases(rng)}


def check_ctfb(seed=0, size=16, channels=4, window=4, samples=24):
    """Max rel. error through one CTFB w.r.t. both inputs and all parameters.

    ``samples`` coordinates are checked per tensor; ``None`` checks every one.
    """
    rng = np.random.default_rng(seed)
    block = CTFB(rng, channels, window=window, heads=2, ratio=2, chirality=HI)
    z_vi = T.Tensor(rng.standard_normal((1, size, size, channels)), requires_grad=True)
    z_ir = T.Tensor(rng.standard_normal((1, size, size, channels)), requires_grad=True)
    params = block.parameters()

    def fn(zv, zi, *_):
        a, b = block(zv, zi)
        return T.concat([a, b], axis=-1)

    return {"ctfb": T.gradcheck(fn, [z_vi, z_ir] + params, samples=samples,
                                rng=np.random.default_rng(seed + 1))}


def check_end2end(seed=0, size=16):
    """Fusion loss through the whole generator (C=4, depth=1, window 4)."""
    rng = np.random.default_rng(seed)
    cfg = FusionConfig(channels=4, depth=1, window=4, heads=2, ffn_ratio=2)
    model = MoCTEFuse(cfg, seed=seed)
    ir = rng.uniform(0.05, 0.95, (1, size, size))
    vi = rng.uniform(0.05, 0.95, (1, size, size))
    p_h = np.array([0.7])

    def fn(*_):
        out = model(T.Tensor(ir), T.Tensor(vi), p_h)
        loss, _ = fusion_objective(out, T.Tensor(ir), T.Tensor(vi), p_h)
        return loss

    return {"end2end": T.gradcheck(fn, model.parameters(), samples=6,
                                   rng=np.random.default_rng(seed + 1))}


def check_competitive(seed=0, trials=100):
    """Identity dL_fusion/do_i = omega_i L'(o_i) on scalar experts."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        p1 = rng.uniform(0.0, 1.0)
        outs = [T.Tensor(rng.uniform(-2.0, 2.0), requires_grad=True) for _ in range(2)]
        rep = verify_competitive_gradient(outs, lambda o: o * o, [p1, 1.0 - p1], tol=COMPETITIVE_TOL)
        worst = max(worst, rep["max_deviation"])
    # a zero gate weight must block the gradient exactly
    outs = [T.Tensor(rng.uniform(-2.0, 2.0), requires_grad=True) for _ in range(2)]
    loss, _ = competitive_loss([o * o for o in outs], [1.0, 0.0])
    loss.backward()
    blocked = float(abs(outs[1].grad)) if outs[1].grad is not None else 0.0
    return {"competitive": worst, "competitive_zero_gate": blocked}


SCOPES = {
    "primitive": (check_primitives, PRIMITIVE_TOL),
    "ctfb": (check_ctfb, BLOCK_TOL),
    "end2end": (check_end2end, BLOCK_TOL),
    "competitive": (check_competitive, COMPETITIVE_TOL),
}


def run(scope, seed=0):
    """Run one scope (or ``"all"``); returns ``[(name, max_error, tol, ok)]``."""
    names = list(SCOPES) if scope == "all" else [scope]
    rows = []
    for name in names:
        fn, tol = SCOPES[name]
        for case, err in fn(seed=seed).items():
            limit = 0.0 if case == "competitive_zero_gate" else tol
            rows.append((case, err, limit, err <= limit))
    return rows
