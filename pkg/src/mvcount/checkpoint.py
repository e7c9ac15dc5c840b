"""Checkpoint container: JSON header + raw little-endian float32 blobs.

File layout:

    b"MVCK" | u32 header length | header JSON (utf-8) | concatenated blobs

The header records the format version, training stage, a config snapshot,
per-tensor (name, shape, offset) sorted by name, optimizer step counts, and
the sha256 of the blob region. Loading verifies magic, version and hash, so
save -> load -> save round-trips to byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MVCK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    stage: str
    tensors: dict  # name -> float32 ndarray
    config: dict
    extras: dict
    format_version: int = FORMAT_VERSION


def save_checkpoint(path, stage: str, tensors: dict, config: dict, extras: dict | None = None) -> Path:
    path = Path(path)
    names = sorted(tensors)
    blobs = []
    entries = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "config": config,
        "tensors": entries,
        "extras": extras or {},
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint file {path}")
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')}"
        )
    payload = raw[8 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: content hash mismatch (corrupt file)")
    tensors = {}
    for entry in header["tensors"]:
        start = entry["offset"]
        blob = payload[start : start + entry["nbytes"]]
        tensors[entry["name"]] = np.frombuffer(blob, dtype="<f4").reshape(entry["shape"]).copy()
    return Checkpoint(
        stage=header["stage"],
        tensors=tensors,
        config=header["config"],
        extras=header["extras"],
        format_version=header["format_version"],
    )
