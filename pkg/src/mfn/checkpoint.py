"""Binary model checkpoints.

Layout (little-endian)::

    "MFN1" | u32 manifest_len | manifest (UTF-8 JSON, sorted keys)
    | u32 tensor_count
    | per tensor: u8 ndim | u32 dim * ndim | f32 data

Tensors are the model parameters in declaration order followed by the
batch-norm running statistics in declaration order.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import CheckpointError
from .models import build_model

MAGIC = b"MFN1"


def _state_tensors(model):
    return [p.value for p in model.parameters()] + [b for _, b in model.named_buffers()]


def encode_checkpoint(model):
    manifest = json.dumps(model.manifest(), sort_keys=True).encode("utf-8")
    tensors = _state_tensors(model)
    parts = [MAGIC, struct.pack("<I", len(manifest)), manifest, struct.pack("<I", len(tensors))]
    for t in tensors:
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, model):
    data = encode_checkpoint(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _read(buf, pos, n, what):
    if pos + n > len(buf):
        raise CheckpointError(f"truncated {what}", pos)
    return buf[pos : pos + n], pos + n


def decode_checkpoint(buf):
    """Return ``(manifest, tensors)`` from checkpoint bytes."""
    magic, pos = _read(buf, 0, 4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", 0)
    raw, pos = _read(buf, pos, 4, "manifest length")
    (mlen,) = struct.unpack("<I", raw)
    raw, pos = _read(buf, pos, mlen, "manifest")
    try:
        manifest = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}", 8) from None
    raw, pos = _read(buf, pos, 4, "tensor count")
    (count,) = struct.unpack("<I", raw)
    tensors = []
    for _ in range(count):
        raw, pos = _read(buf, pos, 1, "tensor header")
        ndim = raw[0]
        raw, pos = _read(buf, pos, 4 * ndim, "tensor dims")
        dims = struct.unpack(f"<{ndim}I", raw)
        size = int(np.prod(dims, dtype=np.int64))
        raw, pos = _read(buf, pos, 4 * size, "tensor data")
        tensors.append(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims))
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor", pos)
    return manifest, tensors


def load_state(model, tensors):
    targets = _state_tensors(model)
    if len(targets) != len(tensors):
        raise CheckpointError(f"checkpoint has {len(tensors)} tensors, model expects {len(targets)}")
    for dst, src in zip(targets, tensors):
        if dst.shape != src.shape:
            raise CheckpointError(f"tensor shape {src.shape} does not match model {dst.shape}")
        dst[...] = src


def load_checkpoint(path):
    """Rebuild the model described by a checkpoint and load its weights."""
    with open(path, "rb") as f:
        manifest, tensors = decode_checkpoint(f.read())
    model = build_model(manifest)
    load_state(model, tensors)
    return model
