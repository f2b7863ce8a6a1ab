"""Adam, the warmup-cosine schedule, and the gate / fusion training loops."""
from __future__ import annotations

import csv
import math
import time
import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import resize, resize_pair, train_crop
from .errors import TrainingError
from .fusion import MoCTEFuse
from .gate import IllumGate, bce_with_logits, gate_forward, prepare_input
from .losses import LossWeights, fusion_objective

LOG_COLUMNS = (
    "step", "l_int_hi", "l_grad_hi", "l_ssim_hi", "l_total_hi",
    "l_int_lo", "l_grad_lo", "l_ssim_lo", "l_total_lo",
    "omega_hi", "omega_lo", "l_fusion", "p_h",
)


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-4
    min_lr: float = 1e-6
    warmup_epochs: float = 3.0
    seed: int = 0
    crop: int = 128
    resize: bool = False
    max_steps: int | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.min_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup must be shorter than training")

    def to_dict(self):
        return asdict(self)


def lr_at(step, total_steps, cfg, warmup_steps=None):
    """Linear warmup from 0 to ``cfg.lr``, then cosine decay to ``cfg.min_lr``."""
    if warmup_steps is None:
        warmup_steps = int(round(cfg.warmup_epochs / cfg.epochs * total_steps))
    if warmup_steps > 0 and step < warmup_steps:
        return cfg.lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = OrderedDict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = OrderedDict((k, np.zeros(p.shape)) for k, p in self.params.items())
        self.v = OrderedDict((k, np.zeros(p.shape)) for k, p in self.params.items())
        self.step_count = 0

    def step(self, lr):
        grads = OrderedDict()
        for name, p in self.params.items():
            g = np.zeros(p.shape) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in {name}", param=name)
            grads[name] = g
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        out = OrderedDict()
        for k in self.params:
            out["m." + k] = self.m[k]
        for k in self.params:
            out["v." + k] = self.v[k]
        return out

    def load_state(self, arrays, step_count):
        for k in self.params:
            self.m[k] = np.array(arrays["m." + k], dtype=float)
            self.v[k] = np.array(arrays["v." + k], dtype=float)
        self.step_count = int(step_count)


def adam_step(params, grads, state, lr):
    """Functional form: apply one Adam update to Tensors ``params`` given ``grads``."""
    for p, g in zip(params, grads):
        p.grad = g
    state.step(lr)


def _progress(log, epoch, loss, lr, start, extra=""):
    if log is not None:
        log(f"epoch {epoch} loss {loss:.6f} lr {lr:.3e} elapsed {time.perf_counter() - start:.1f}s{extra}")


def gate_accuracy(gate, images, labels, batch_size=32):
    correct = 0
    for i in range(0, len(images), batch_size):
        probs = gate_forward(images[i:i + batch_size], gate)
        correct += int(np.sum((probs.p_h > 0.5).astype(int) == labels[i:i + batch_size]))
    return correct / len(images)


def _gate_inputs(images, gate_cfg):
    if gate_cfg.input_size is not None:
        images = [resize(im, gate_cfg.input_size) for im in images]
    return np.stack(images)


def train_gate(images, labels, gate_cfg, cfg, val=None, log=print, gate=None,
               optimizer=None, start_step=0, stop_at_accuracy=None):
    """Fit the illumination gate with BCE (label 1 = high illumination).

    Returns ``(gate, optimizer, history)``; history holds per-epoch loss,
    lr and accuracy (on ``val`` when given, else on the training set).
    Training ends early once accuracy reaches ``stop_at_accuracy``.
    """
    labels = np.asarray(labels, dtype=int)
    if len(np.unique(labels)) < 2:
        warnings.warn("gate training data contains a single class; the gate will be degenerate")
    images = _gate_inputs(list(images), gate_cfg)
    if val is not None:
        val = (_gate_inputs(list(val[0]), gate_cfg), np.asarray(val[1], dtype=int))
    gate = gate or IllumGate(gate_cfg, seed=cfg.seed)
    opt = optimizer or Adam(gate.named_parameters())
    rng = np.random.default_rng(cfg.seed + start_step)
    n = len(images)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    warmup = int(round(cfg.warmup_epochs * steps_per_epoch))
    history = []
    start = time.perf_counter()
    step = start_step
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        lr = 0.0
        for i in range(0, n, cfg.batch_size):
            if step >= total:
                break
            idx = order[i:i + cfg.batch_size]
            x = T.Tensor(prepare_input(images[idx], gate_cfg.in_channels))
            opt.zero_grad()
            loss = bce_with_logits(gate(x), labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite gate loss at step {step}")
            loss.backward()
            step += 1
            lr = lr_at(step, total, cfg, warmup)
            opt.step(lr)
            losses.append(float(loss.data))
        if not losses:
            break
        ev = val if val is not None else (images, labels)
        acc = gate_accuracy(gate, ev[0], ev[1])
        rec = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr, "accuracy": acc, "step": step}
        history.append(rec)
        _progress(log, epoch, rec["loss"], lr, start, f" accuracy {acc:.4f}")
        if stop_at_accuracy is not None and acc >= stop_at_accuracy:
            break
    return gate, opt, history


def _batch_arrays(pairs):
    return np.stack([p.ir for p in pairs]), np.stack([p.vi_luma for p in pairs])


def pair_gate_probs(pairs, gate):
    """P_H for each pair from its full (uncropped) visible image.

    The gate is frozen during fusion training, so one evaluation per pair
    suffices.
    """
    out = np.empty(len(pairs))
    for k, p in enumerate(pairs):
        vi = p.vi if p.vi.ndim == 3 else np.repeat(p.vi[..., None], 3, -1)
        if gate.cfg.input_size is not None:
            vi = resize(vi, gate.cfg.input_size)
        out[k] = gate_forward(vi, gate).p_h[0]
    return out


class _LossLog:
    def __init__(self, path):
        self.fh = None
        if path is not None:
            self.fh = open(path, "a", newline="", encoding="utf-8")
            self.writer = csv.writer(self.fh)
            if self.fh.tell() == 0:
                self.writer.writerow(LOG_COLUMNS)

    def write(self, step, terms, p_h):
        if self.fh is None:
            return
        row = [step]
        for e in (0, 1):
            row += [terms.l_int[e], terms.l_grad[e], terms.l_ssim[e], terms.l_total[e]]
        row += [terms.omega[0], terms.omega[1], terms.l_fusion, p_h]
        self.writer.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])

    def close(self):
        if self.fh is not None:
            self.fh.close()


def train_fuse(pairs, gate, fusion_cfg, cfg, weights=None, log_csv=None, log=print,
               model=None, optimizer=None, start_step=0, force_p_h=None):
    """Train the fusion network against a frozen gate.

    ``pairs`` is a list of :class:`ImagePair`.  The gate is only evaluated,
    once per pair on the full visible image (never differentiated or
    updated).  ``force_p_h`` pins P_H for every
    sample, reproducing the single-expert ablations.  Returns
    ``(model, optimizer, history)``; history has one record per epoch plus
    ``"steps"`` with per-step ``(step, l_fusion, omega)``.
    """
    model = model or MoCTEFuse(fusion_cfg, seed=cfg.seed)
    opt = optimizer or Adam(model.named_parameters())
    weights = weights or LossWeights()
    rng = np.random.default_rng(cfg.seed + start_step)
    n = len(pairs)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    warmup = int(round(cfg.warmup_epochs * steps_per_epoch))
    if force_p_h is None:
        gate_p_h = pair_gate_probs(pairs, gate)
    else:
        gate_p_h = np.full(n, float(force_p_h))
    history = {"epochs": [], "steps": []}
    logger = _LossLog(log_csv)
    start = time.perf_counter()
    step = start_step
    try:
        for epoch in range(1, cfg.epochs + 1):
            if step >= total:
                break
            order = rng.permutation(n)
            losses = []
            lr = 0.0
            for i in range(0, n, cfg.batch_size):
                if step >= total:
                    break
                idx = order[i:i + cfg.batch_size]
                batch = []
                for j in idx:
                    p = pairs[j]
                    if cfg.resize:
                        p = resize_pair(p, (cfg.crop, cfg.crop))
                    elif p.shape != (cfg.crop, cfg.crop):
                        p, _ = train_crop(p, cfg.crop, rng)
                    batch.append(p)
                ir, vi = _batch_arrays(batch)
                p_h = gate_p_h[idx]
                opt.zero_grad()
                out = model(T.Tensor(ir), T.Tensor(vi), p_h)
                loss, terms = fusion_objective(out, T.Tensor(ir), T.Tensor(vi), p_h, weights)
                if not np.isfinite(loss.data):
                    raise TrainingError(f"non-finite fusion loss at step {step}")
                loss.backward()
                step += 1
                lr = lr_at(step, total, cfg, warmup)
                opt.step(lr)
                losses.append(terms.l_fusion)
                history["steps"].append((step, terms.l_fusion, terms.omega.copy()))
                logger.write(step, terms, float(np.mean(p_h)))
            if losses:
                rec = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr, "step": step}
                history["epochs"].append(rec)
                _progress(log, epoch, rec["loss"], lr, start)
    finally:
        logger.close()
    return model, opt, history
