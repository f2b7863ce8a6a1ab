"""Image I/O, luminance/chroma handling and dataset discovery."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IngestionError

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class ImagePair:
    ir: np.ndarray  # [H,W] in [0,1]
    vi: np.ndarray  # [H,W] or [H,W,3] in [0,1]
    vi_luma: np.ndarray  # [H,W]
    id: str = ""
    label: int | None = None

    @property
    def shape(self):
        return self.ir.shape


def read_image(path):
    """Decode an 8-bit PNG/PGM/PPM file to floats in [0,1] ([H,W] or [H,W,3])."""
    with Image.open(path) as im:
        mode = "L" if im.mode in ("1", "L", "LA", "I", "I;16") else "RGB"
        arr = np.asarray(im.convert(mode), dtype=np.float64)
    return arr / 255.0


def to_uint8(img):
    return np.clip(np.floor(np.asarray(img, dtype=float) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_image(img, path):
    arr = to_uint8(img)
    Image.fromarray(arr).save(path)


def luma(img):
    img = np.asarray(img, dtype=float)
    return img if img.ndim == 2 else img @ LUMA


def rgb_to_ycbcr(rgb):
    y = rgb @ LUMA
    cb = (rgb[..., 2] - y) / 1.772 + 0.5
    cr = (rgb[..., 0] - y) / 1.402 + 0.5
    return y, cb, cr


def ycbcr_to_rgb(y, cb, cr):
    r = y + 1.402 * (cr - 0.5)
    b = y + 1.772 * (cb - 0.5)
    g = (y - LUMA[0] * r - LUMA[2] * b) / LUMA[1]
    return np.stack([r, g, b], axis=-1)


def label_from_id(stem):
    """Day/night flag from an MSRS-style id suffix: ...D -> 1, ...N -> 0."""
    if stem.endswith("D"):
        return 1
    if stem.endswith("N"):
        return 0
    return None


def load_pair(ir_path, vi_path, label=None, pair_id=None):
    pair_id = pair_id or Path(ir_path).stem
    ir = read_image(ir_path)
    if ir.ndim == 3:
        ir = luma(ir)
    vi = read_image(vi_path)
    if ir.shape != vi.shape[:2]:
        raise IngestionError(f"pair {pair_id}: ir {ir.shape} and vi {vi.shape[:2]} differ in size")
    if label is None:
        label = label_from_id(pair_id)
    return ImagePair(ir=ir, vi=vi, vi_luma=luma(vi), id=pair_id, label=label)


def _stems(directory):
    out = {}
    for p in sorted(Path(directory).iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            out[p.stem] = p
    return out


def read_labels(path):
    labels = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            labels[rec["id"]] = int(rec["label"])
    return labels


@dataclass
class DatasetSpec:
    root: Path
    ir_dir: Path
    vi_dir: Path
    ids: list
    labels: dict
    ir_files: dict
    vi_files: dict

    def load(self, pair_id):
        return load_pair(self.ir_files[pair_id], self.vi_files[pair_id],
                         label=self.labels.get(pair_id), pair_id=pair_id)

    def pairs(self):
        return [self.load(i) for i in self.ids]


def discover(root, require_labels=False):
    """Find matching-stem pairs under ``<root>/ir`` and ``<root>/vi``.

    Labels come from ``<root>/labels.csv`` (id,label) when present, else
    from the D/N id suffix.  Ids are sorted so iteration order is fixed.
    """
    root = Path(root)
    ir_dir, vi_dir = root / "ir", root / "vi"
    if not ir_dir.is_dir() or not vi_dir.is_dir():
        raise IngestionError(f"{root} must contain ir/ and vi/ directories")
    ir_files, vi_files = _stems(ir_dir), _stems(vi_dir)
    ids = sorted(set(ir_files) & set(vi_files))
    if not ids:
        raise IngestionError(f"no matching ir/vi stems under {root}")
    labels = {}
    csv_path = root / "labels.csv"
    overrides = read_labels(csv_path) if csv_path.exists() else {}
    for i in ids:
        lab = overrides.get(i, label_from_id(i))
        if lab is not None:
            labels[i] = lab
    if require_labels:
        missing = [i for i in ids if i not in labels]
        if missing:
            raise IngestionError(
                f"no day/night label for {missing[:5]}{'...' if len(missing) > 5 else ''}: "
                "labels come from labels.csv (id,label) or an id ending in D (day) / N (night)")
    return DatasetSpec(root, ir_dir, vi_dir, ids, labels, ir_files, vi_files)


def resize(img, size):
    """Bilinear resize of [H,W] or [H,W,3] floats to ``size`` = (H, W)."""
    h, w = size
    if img.ndim == 2:
        return np.asarray(Image.fromarray(img.astype(np.float32)).resize(
            (w, h), Image.BILINEAR), dtype=np.float64)
    return np.stack([resize(img[..., c], size) for c in range(img.shape[-1])], axis=-1)


def resize_pair(pair, size):
    return replace(pair, ir=resize(pair.ir, size), vi=resize(pair.vi, size),
                   vi_luma=resize(pair.vi_luma, size))


def train_crop(pair, size, rng):
    """Same random ``size`` x ``size`` window from IR and VI; upsizes small pairs first."""
    h, w = pair.shape
    if h < size or w < size:
        pair = resize_pair(pair, (max(h, size), max(w, size)))
        h, w = pair.shape
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    sl = (slice(top, top + size), slice(left, left + size))
    out = replace(pair, ir=pair.ir[sl], vi=pair.vi[sl], vi_luma=pair.vi_luma[sl])
    assert out.ir.shape == out.vi_luma.shape == out.vi.shape[:2]
    return out, (top, left)


def save_fused(i_f, vi, path):
    """Write the fused luminance; a colour VI contributes its chroma (BT.601 YCbCr)."""
    i_f = np.clip(np.asarray(i_f, dtype=float), 0.0, 1.0)
    vi = np.asarray(vi, dtype=float)
    path = Path(path)
    if not path.parent.exists() or not os.access(path.parent, os.W_OK):
        raise OSError(f"cannot write to {path}")
    if vi.ndim == 3:
        _, cb, cr = rgb_to_ycbcr(vi)
        write_image(np.clip(ycbcr_to_rgb(i_f, cb, cr), 0.0, 1.0), path)
    else:
        write_image(i_f, path)


def make_synthetic_corpus(root, n_pairs=16, size=64, seed=0, day_fraction=0.5):
    """Write a registered IR/VI toy corpus with D/N ids under ``root``.

    Day scenes are bright (mean 0.6-0.9) textured colour images; night
    scenes are dark (0.1-0.4).  The IR channel shows a few warm blobs over
    a cool background independent of illumination.
    """
    rng = np.random.default_rng(seed)
    root = Path(root)
    (root / "ir").mkdir(parents=True, exist_ok=True)
    (root / "vi").mkdir(parents=True, exist_ok=True)
    n_day = int(round(n_pairs * day_fraction))
    ids = []
    yy, xx = np.mgrid[0:size, 0:size]
    for k in range(n_pairs):
        day = k < n_day
        pid = f"{k:05d}{'D' if day else 'N'}"
        vi, ir = synthetic_scene(rng, size, day, yy, xx)
        write_image(ir, root / "ir" / f"{pid}.png")
        write_image(vi, root / "vi" / f"{pid}.png")
        ids.append(pid)
    return ids


def synthetic_scene(rng, size, day, yy=None, xx=None):
    if yy is None:
        yy, xx = np.mgrid[0:size, 0:size]
    mu = rng.uniform(0.6, 0.9) if day else rng.uniform(0.1, 0.4)
    texture = rng.normal(0.0, 0.06, (size, size))
    stripes = 0.05 * np.sin(2 * np.pi * (xx * rng.uniform(0.05, 0.15) + yy * rng.uniform(0.0, 0.1)))
    base = np.clip(mu + texture + stripes, 0.0, 1.0)
    tint = rng.uniform(0.9, 1.1, size=3)
    vi = np.clip(base[..., None] * tint, 0.0, 1.0)
    ir = np.full((size, size), 0.2) + rng.normal(0.0, 0.02, (size, size))
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(size / 16, size / 6)
        ir += 0.6 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return vi, np.clip(ir, 0.0, 1.0)


def synthetic_brightness_images(n_bright, n_dark, size, seed):
    """Gate corpus: Gaussian-textured visible images with labels (1 bright, 0 dark)."""
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for k in range(n_bright + n_dark):
        bright = k < n_bright
        vi, _ = synthetic_scene(rng, size, bright)
        imgs.append(vi)
        labels.append(1 if bright else 0)
    order = rng.permutation(len(imgs))
    return np.stack(imgs)[order], np.array(labels)[order]
