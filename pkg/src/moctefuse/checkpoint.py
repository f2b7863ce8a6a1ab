"""Checkpoint container: JSON header + raw little-endian float64 payload.

Layout::

    b"MCTFCKPT"                 8-byte magic
    uint32 LE                   format version
    uint64 LE                   header length in bytes
    header                      UTF-8 JSON, sorted keys
    payload                     parameters in manifest order, '<f8'

The header holds ``kind`` (``"fusion"`` or ``"gate"``), the model config,
a ``manifest`` list of ``{"name", "shape"}`` and free-form ``meta``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict

import numpy as np

from .errors import CheckpointError

MAGIC = b"MCTFCKPT"
FORMAT_VERSION = 1


def save(path, kind, config, params, meta=None):
    """Write ``params`` (ordered name -> array) to ``path``."""
    manifest = [{"name": k, "shape": list(np.shape(v))} for k, v in params.items()]
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "manifest": manifest,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load(path, kind=None):
    """Return ``(header, OrderedDict name -> array)``."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", blob[8:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack("<Q", blob[12:20])
    header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header.get('kind')}")
    offset = 20 + hlen
    params = OrderedDict()
    for entry in header["manifest"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + 8 * n
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        params[entry["name"]] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(
            entry["shape"]).astype(np.float64)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes after payload")
    return header, params


def apply(module, params, prefix=""):
    """Copy checkpoint arrays into ``module``'s parameters, rejecting any mismatch."""
    own = module.named_parameters()
    wanted = OrderedDict((k[len(prefix):], v) for k, v in params.items() if k.startswith(prefix))
    if list(own) != list(wanted):
        missing = sorted(set(own) - set(wanted))
        extra = sorted(set(wanted) - set(own))
        raise CheckpointError(f"parameter manifest mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    for name, p in own.items():
        arr = wanted[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {arr.shape}, model {p.shape}")
        p.data = arr.copy()


def describe(path):
    """Lines of ``name shape sha256[:16]`` for every parameter."""
    header, params = load(path)
    lines = [f"kind={header['kind']} format_version={header['format_version']} "
             f"params={len(params)} values={sum(v.size for v in params.values())}",
             f"config={json.dumps(header['config'], sort_keys=True)}",
             f"meta={json.dumps(header['meta'], sort_keys=True)}"]
    for name, arr in params.items():
        digest = hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()[:16]
        lines.append(f"{name}\t{'x'.join(map(str, arr.shape)) or 'scalar'}\t{digest}")
    return lines
