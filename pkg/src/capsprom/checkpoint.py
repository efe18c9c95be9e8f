"""Self-describing binary checkpoints.

Byte layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"CAPSPRM\\0"
    8       4     format version (uint32)
    12      8     header length H (uint64)
    20      H     header: UTF-8 JSON, keys sorted, no whitespace
                  {"architecture": {...}, "metadata": {...}, "seed": int,
                   "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    20+H    P     tensor payload: each tensor's C-order little-endian bytes,
                  concatenated in header order; "offset" is relative to 20+H
    20+H+P  32    SHA-256 of every preceding byte

Saving the same parameters, architecture and metadata always produces the
same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"CAPSPRM\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    architecture: dict
    params: dict[str, Tensor]
    seed: int = 0
    metadata: dict = field(default_factory=dict)


def save_checkpoint(path, architecture: dict, params: dict[str, Tensor], seed: int = 0,
                    metadata: dict | None = None) -> None:
    table, blobs, offset = [], [], 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"architecture": architecture, "metadata": metadata or {}, "seed": int(seed),
                         "tensors": table}, sort_keys=True, separators=(",", ":")).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path, expected_kind: str | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size + 32:
        raise CorruptCheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads {VERSION}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{path}: digest mismatch (truncated or modified)")
    start = _PREFIX.size + hlen
    header = json.loads(body[_PREFIX.size : start])
    kind = header["architecture"].get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise ArchitectureMismatchError(f"{path}: holds a {kind!r} model, expected {expected_kind!r}")
    params = {}
    for entry in header["tensors"]:
        lo = start + entry["offset"]
        raw = body[lo : lo + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        params[entry["name"]] = Tensor(arr.astype(arr.dtype.newbyteorder("="), copy=False), requires_grad=True)
    return Checkpoint(header["architecture"], params, header["seed"], header["metadata"])


def save_model(path, model, seed: int = 0, metadata: dict | None = None) -> None:
    save_checkpoint(path, model.architecture(), model.params, seed, metadata)


def load_model(path, expected_kind: str | None = None):
    """Rebuild a CapsProm or CnnProm model from a checkpoint."""
    from .capsnet import CapsProm
    from .cnn import CnnProm

    ckpt = load_checkpoint(path, expected_kind)
    classes = {CapsProm.kind: CapsProm, CnnProm.kind: CnnProm}
    kind = ckpt.architecture.get("kind")
    if kind not in classes:
        raise ArchitectureMismatchError(f"{path}: unknown model kind {kind!r}")
    try:
        model = classes[kind].from_architecture(ckpt.architecture, ckpt.params)
        reference = classes[kind].from_architecture(ckpt.architecture, None)
    except (TypeError, ValueError, KeyError) as exc:
        raise ArchitectureMismatchError(f"{path}: inconsistent architecture: {exc}") from exc
    want = {k: v.shape for k, v in reference.params.items()}
    have = {k: v.shape for k, v in ckpt.params.items()}
    if want != have:
        raise ArchitectureMismatchError(f"{path}: parameter tensors do not match the architecture")
    return model, ckpt
