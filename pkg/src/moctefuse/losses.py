"""Fusion training objectives and the gate-weighted competitive loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, StabilityError, VerificationError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 5.0
    gamma: float = 10.0
    w1: float = 0.5
    w2: float = 0.5
    n_experts: int = 2

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.w1, self.w2) < 0:
            raise ValueError("loss weights must be nonnegative")
        if abs(self.w1 + self.w2 - 1.0) > 1e-12:
            raise ValueError("w1 + w2 must equal 1")


@dataclass
class LossTerms:
    l_int: np.ndarray  # [N] per expert, batch-averaged
    l_grad: np.ndarray
    l_ssim: np.ndarray
    l_total: np.ndarray
    l_fusion: float
    omega: np.ndarray  # [N] batch-averaged mixture weights


def _batched(*imgs):
    out = []
    for im in imgs:
        im = T.as_tensor(im)
        if im.ndim == 2:
            im = T.reshape(im, (1,) + im.shape)
        out.append(im)
    shapes = {im.shape for im in out}
    if len(shapes) != 1:
        raise DimensionError(f"image shapes differ: {sorted(shapes)}")
    return out


def _finish(per_sample, squeeze):
    return T.reshape(per_sample, ()) if squeeze else per_sample


def intensity_loss(i_f, i_ir, i_vi):
    squeeze = T.as_tensor(i_f).ndim == 2
    f, ir, vi = _batched(i_f, i_ir, i_vi)
    per = T.mean(T.tabs(f - ir), axis=(1, 2)) + T.mean(T.tabs(f - vi), axis=(1, 2))
    return _finish(per, squeeze)


def sobel_magnitude(img):
    """|Sobel_x| + |Sobel_y| of [B,H,W] with reflect padding.

    Built from differences of shifted slices so flat regions give exact zeros.
    """
    b, h, w = img.shape
    if h < 3 or w < 3:
        raise DimensionError(f"image {h}x{w} smaller than the 3x3 Sobel support")
    p = T.reshape(T.pad2d(T.reshape(img, (b, 1, h, w)), 1, "reflect"), (b, h + 2, w + 2))

    def at(dy, dx):
        return p[:, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    gx = (at(-1, 1) - at(-1, -1)) + (at(0, 1) - at(0, -1)) * 2.0 + (at(1, 1) - at(1, -1))
    gy = (at(1, -1) - at(-1, -1)) + (at(1, 0) - at(-1, 0)) * 2.0 + (at(1, 1) - at(-1, 1))
    return T.tabs(gx) + T.tabs(gy)


def gradient_loss(i_f, i_ir, i_vi):
    squeeze = T.as_tensor(i_f).ndim == 2
    f, ir, vi = _batched(i_f, i_ir, i_vi)
    target = T.maximum(sobel_magnitude(ir), sobel_magnitude(vi))
    per = T.mean(T.tabs(sobel_magnitude(f) - target), axis=(1, 2))
    return _finish(per, squeeze)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(x, y):
    """Mean SSIM per sample of [B,H,W] images (valid 11x11 Gaussian filtering)."""
    b, h, w = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DimensionError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    k = T.Tensor(gaussian_window()[None, None])
    x4 = T.reshape(x, (b, 1, h, w))
    y4 = T.reshape(y, (b, 1, h, w))

    def filt(t):
        return T.conv2d(t, k)

    mx, my = filt(x4), filt(y4)
    mx2, my2, mxy = mx * mx, my * my, mx * my
    sxx = filt(x4 * x4) - mx2
    syy = filt(y4 * y4) - my2
    sxy = filt(x4 * y4) - mxy
    num = (2.0 * mxy + SSIM_C1) * (2.0 * sxy + SSIM_C2)
    den = (mx2 + my2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return T.mean(num / den, axis=(1, 2, 3))


def ssim_loss(i_f, i_ir, i_vi, weights=None):
    w = weights or LossWeights()
    squeeze = T.as_tensor(i_f).ndim == 2
    f, ir, vi = _batched(i_f, i_ir, i_vi)
    per = (1.0 - ssim(f, ir)) * w.w1 + (1.0 - ssim(f, vi)) * w.w2
    return _finish(per, squeeze)


def total_loss(i_f, i_ir, i_vi, weights=None, return_terms=False):
    w = weights or LossWeights()
    li = intensity_loss(i_f, i_ir, i_vi)
    lg = gradient_loss(i_f, i_ir, i_vi)
    ls = ssim_loss(i_f, i_ir, i_vi, w)
    tot = li * w.alpha + lg * w.beta + ls * w.gamma
    return (tot, (li, lg, ls)) if return_terms else tot


def _competitive(losses, probs):
    """Forward pieces of -ln sum_i P_i exp(-L_i) along the last axis."""
    with np.errstate(divide="ignore"):
        logw = np.log(probs) - losses
    m = logw.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise StabilityError("every gated expert term underflowed to zero")
    e = np.exp(logw - m)
    s = e.sum(axis=-1, keepdims=True)
    value = -(m + np.log(s))[..., 0]
    return value, e / s


def competitive_loss(per_expert, gate):
    """Gate-weighted soft-min over expert losses.

    ``per_expert``: Tensor [..., N] (or a list of N scalar Tensors);
    ``gate``: array broadcastable to it, nonnegative, summing to 1.
    Returns ``(L_fusion, omega)`` where ``omega`` are the responsibilities
    P_i e^{-L_i} / sum_j P_j e^{-L_j}, which are also the gradient of
    L_fusion with respect to each L_i.
    """
    if isinstance(per_expert, (list, tuple)):
        per_expert = T.stack(list(per_expert), axis=-1)
    probs = np.broadcast_to(np.asarray(gate, dtype=float), per_expert.shape)
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("gate probabilities must be nonnegative and sum to 1")
    value, omega = _competitive(per_expert.data, probs)
    # shifted log-sum-exp on the tape; the shift is a constant so autodiff
    # reproduces the responsibilities independently of ``omega``
    with np.errstate(divide="ignore"):
        shift = np.max(np.log(probs) - per_expert.data, axis=-1, keepdims=True)
    expo = T.clip(T.neg(T.add(per_expert, T.Tensor(shift))), -np.inf, 700.0)
    s = T.tsum(T.mul(T.exp(expo), T.Tensor(probs)), axis=-1)
    out = T.sub(T.Tensor(-shift[..., 0]), T.log(s))
    return out, omega


def competitive_loss_scalar(losses, probs):
    """Plain-float convenience wrapper around :func:`competitive_loss`."""
    value, omega = _competitive(np.asarray(losses, dtype=float), np.asarray(probs, dtype=float))
    return float(value), omega


def verify_competitive_gradient(outputs, loss_fn, gate, tol=1e-8):
    """Check dL_fusion/do_i == omega_i * L'(o_i) for differentiable expert outputs.

    ``outputs`` are leaf Tensors (requires_grad) and ``loss_fn`` maps one
    output to a scalar loss.  Returns a report dict; raises
    :class:`VerificationError` naming the worst expert when the deviation
    exceeds ``tol``.
    """
    for o in outputs:
        o.grad = None
    losses = [loss_fn(o) for o in outputs]
    l_fusion, omega = competitive_loss(losses, gate)
    l_fusion.backward()
    autodiff = [np.zeros(o.shape) if o.grad is None else o.grad.copy() for o in outputs]

    deviations = []
    for i, o in enumerate(outputs):
        o.grad = None
        loss_fn(o).backward()
        expected = omega[i] * o.grad
        o.grad = None
        a, b = autodiff[i].ravel(), expected.ravel()
        denom = np.maximum(np.abs(a), np.abs(b))
        err = np.where(denom > 0, np.abs(a - b) / np.where(denom > 0, denom, 1.0), 0.0)
        deviations.append(float(err.max()) if err.size else 0.0)
    worst = int(np.argmax(deviations))
    report = {
        "l_fusion": float(l_fusion.data),
        "omega": omega.tolist(),
        "deviations": deviations,
        "max_deviation": deviations[worst],
    }
    if deviations[worst] > tol:
        raise VerificationError(
            f"expert {worst}: gradient deviates from omega*L' by {deviations[worst]:.3e}",
            index=worst, deviation=deviations[worst])
    return report


def fusion_objective(out, i_ir, i_vi, p_h, weights=None):
    """Competitive loss for a batch of FusionOutput against its sources.

    Returns the batch-mean L_fusion tensor and a :class:`LossTerms` summary.
    """
    w = weights or LossWeights()
    l_hi, (li_h, lg_h, ls_h) = total_loss(out.i_f_hi, i_ir, i_vi, w, return_terms=True)
    l_lo, (li_l, lg_l, ls_l) = total_loss(out.i_f_lo, i_ir, i_vi, w, return_terms=True)
    p_h = np.asarray(p_h, dtype=float).reshape(-1)
    per = T.stack([T.reshape(l_hi, (-1,)), T.reshape(l_lo, (-1,))], axis=-1)
    probs = np.stack([p_h, 1.0 - p_h], axis=-1)
    probs = np.broadcast_to(probs, per.shape)
    l_fusion, omega = competitive_loss(per, probs)
    loss = T.mean(l_fusion)

    def bm(t):
        return float(np.mean(t.data))

    terms = LossTerms(
        l_int=np.array([bm(li_h), bm(li_l)]),
        l_grad=np.array([bm(lg_h), bm(lg_l)]),
        l_ssim=np.array([bm(ls_h), bm(ls_l)]),
        l_total=np.array([bm(l_hi), bm(l_lo)]),
        l_fusion=float(loss.data),
        omega=omega.reshape(-1, 2).mean(axis=0),
    )
    return loss, terms
