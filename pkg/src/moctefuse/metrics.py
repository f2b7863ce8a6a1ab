"""Fusion quality metrics: EN, SD, MI and pixel-domain multi-scale VIF."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import DimensionError

METRICS = ("en", "sd", "mi", "vif")
VIF_VARIANT = "pixel-domain multi-scale VIF (VIFP), 4 scales, sigma_n^2=2 on 0-255"


def quantize(img):
    """[0,1] floats -> integer levels 0..255 via floor(x*255 + 0.5)."""
    q = np.floor(np.asarray(img, dtype=float) * 255.0 + 0.5)
    return np.clip(q, 0, 255).astype(np.int64)


def _entropy_from_counts(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


def entropy(img):
    """Shannon entropy in bits of the 256-level histogram."""
    return _entropy_from_counts(np.bincount(quantize(img).ravel(), minlength=256).astype(float))


def std_dev(img):
    """Population standard deviation on the 0-255 scale."""
    return float(np.std(np.asarray(img, dtype=float)) * 255.0)


def _mi_pair(a, b):
    qa, qb = quantize(a), quantize(b)
    joint = _kernels.joint_histogram(qa, qb, 256)
    return (_entropy_from_counts(joint.sum(axis=1)) + _entropy_from_counts(joint.sum(axis=0))
            - _entropy_from_counts(joint.ravel()))


def mutual_information(fused, ir, vi):
    """MI(fused, ir) + MI(fused, vi) in bits."""
    fused, ir, vi = (np.asarray(x, dtype=float) for x in (fused, ir, vi))
    if not fused.shape == ir.shape == vi.shape:
        raise DimensionError(f"shape mismatch: {fused.shape}, {ir.shape}, {vi.shape}")
    return _mi_pair(fused, ir) + _mi_pair(fused, vi)


def _gauss(n, sd):
    ax = np.arange(n) - (n - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sd * sd))
    k = np.outer(g, g)
    return k / k.sum()


def _filter_valid(img, k):
    win = sliding_window_view(img, k.shape)
    return np.einsum("ijkl,kl->ij", win, k)


def vifp(ref, dist, scales=4, sigma_nsq=2.0):
    """Pixel-domain VIF of ``dist`` against reference ``ref`` (both 0-255 floats)."""
    ref = np.asarray(ref, dtype=float)
    dist = np.asarray(dist, dtype=float)
    eps = 1e-10
    num = 0.0
    den = 0.0
    for scale in range(1, scales + 1):
        n = 2 ** (4 - scale + 1) + 1
        win = _gauss(n, n / 5.0)
        if scale > 1:
            ref = _filter_valid(ref, win)[::2, ::2]
            dist = _filter_valid(dist, win)[::2, ::2]
        mu1 = _filter_valid(ref, win)
        mu2 = _filter_valid(dist, win)
        s1 = _filter_valid(ref * ref, win) - mu1 * mu1
        s2 = _filter_valid(dist * dist, win) - mu2 * mu2
        s12 = _filter_valid(ref * dist, win) - mu1 * mu2
        s1 = np.maximum(s1, 0.0)
        s2 = np.maximum(s2, 0.0)
        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        g = np.where(s1 < eps, 0.0, g)
        sv = np.where(s1 < eps, s2, sv)
        s1 = np.where(s1 < eps, 0.0, s1)
        g = np.where(s2 < eps, 0.0, g)
        sv = np.where(s2 < eps, 0.0, sv)
        sv = np.where(g < 0, s2, sv)
        g = np.maximum(g, 0.0)
        sv = np.maximum(sv, eps)
        num += float(np.sum(np.log10(1.0 + g * g * s1 / (sv + sigma_nsq))))
        den += float(np.sum(np.log10(1.0 + s1 / sigma_nsq)))
    if den == 0.0:
        return 1.0 if num == 0.0 else float("inf")
    return num / den


def vif_scales(shape, requested=4):
    """Largest usable scale count (<= requested) for an image shape."""
    h, w = shape
    usable = 0
    for scale in range(1, requested + 1):
        n = 2 ** (4 - scale + 1) + 1
        if scale > 1:
            h, w = (h - n + 2) // 2, (w - n + 2) // 2
        if min(h, w) < n:
            break
        usable = scale
    return usable


def vif(fused, ir, vi):
    """Mean of VIF(ir -> fused) and VIF(vi -> fused); inputs in [0,1]."""
    fused, ir, vi = (np.asarray(x, dtype=float) * 255.0 for x in (fused, ir, vi))
    if not fused.shape == ir.shape == vi.shape:
        raise DimensionError(f"shape mismatch: {fused.shape}, {ir.shape}, {vi.shape}")
    scales = vif_scales(fused.shape)
    if scales == 0:
        raise DimensionError(f"image {fused.shape} too small for VIF")
    if scales < 4:
        warnings.warn(f"image {fused.shape} too small for 4 VIF scales; using {scales}")
    return 0.5 * (vifp(ir, fused, scales) + vifp(vi, fused, scales))


def evaluate_image(fused, ir, vi):
    return {
        "en": entropy(fused),
        "sd": std_dev(fused),
        "mi": mutual_information(fused, ir, vi),
        "vif": vif(fused, ir, vi),
    }


@dataclass
class MetricReport:
    rows: list  # [(id, {metric: value})]
    mean: dict
    std: dict
    median: dict

    def summary(self):
        return {
            "count": len(self.rows),
            "vif_variant": VIF_VARIANT,
            "metrics": {
                m: {
                    "mean": self.mean[m],
                    "std": self.std[m],
                    "median": self.median[m],
                    "display": f"{self.mean[m]:.4f} ± {self.std[m]:.4f}",
                }
                for m in METRICS
            },
        }


def aggregate(reports, ids=None):
    """Mean, population std and median per metric over per-image dicts."""
    reports = list(reports)
    if not reports:
        raise ValueError("aggregate() needs at least one report")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(reports))]
    table = {m: np.array([r[m] for r in reports], dtype=float) for m in METRICS}
    return MetricReport(
        rows=list(zip(ids, reports)),
        mean={m: float(v.mean()) for m, v in table.items()},
        std={m: float(v.std()) for m, v in table.items()},
        median={m: float(np.median(v)) for m, v in table.items()},
    )


def write_report(report, csv_path, json_path):
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("id",) + METRICS)
        for rid, vals in report.rows:
            writer.writerow([rid] + [repr(float(vals[m])) for m in METRICS])
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True, ensure_ascii=False)


def read_report(csv_path):
    ids, rows = [], []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            ids.append(rec["id"])
            rows.append({m: float(rec[m]) for m in METRICS})
    return aggregate(rows, ids)
