"""Checkpoint files: magic, version, JSON manifest, little-endian float32 payload.

Layout::

    b"LFCK" | uint32 version | uint64 manifest length | manifest (UTF-8 JSON) | payload

The manifest lists every tensor's name, shape, dtype ("<f4"), byte offset into
the payload and byte length, plus an echo of the model config.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from latentflow.errors import FormatError

MAGIC = b"LFCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    tensors: dict
    config: dict = field(default_factory=dict)
    kind: str = "flow"


@dataclass
class LoadReport:
    missing: list
    unexpected: list

    @property
    def unmatched_layers(self) -> list:
        return sorted({n.rsplit(".", 1)[0] for n in self.unexpected})


def save_checkpoint(path, tensors: dict, config: Optional[dict] = None, kind: str = "flow") -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4",
                        "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    manifest = json.dumps({"version": VERSION, "kind": kind, "config": config or {},
                           "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        for blob in chunks:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"truncated checkpoint header at byte offset {len(raw)}")
    magic, version, mlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte offset 4")
    start = _PREFIX.size
    if len(raw) < start + mlen:
        raise FormatError(f"truncated manifest: need {mlen} bytes at byte offset {start}")
    try:
        manifest = json.loads(raw[start:start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt manifest at byte offset {start}: {exc}") from exc
    base = start + mlen
    tensors = {}
    for e in manifest["tensors"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(raw):
            raise FormatError(f"truncated payload for {e['name']} at byte offset {lo}")
        arr = np.frombuffer(raw, dtype=e["dtype"], count=e["nbytes"] // 4, offset=lo)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return Checkpoint(tensors, manifest.get("config", {}), manifest.get("kind", "flow"))


def save_model(path, model, extra: Optional[dict] = None, kind: str = "flow") -> None:
    state = model.state_dict()
    if extra:
        state.update(extra)
    save_checkpoint(path, state, model.cfg.to_dict(), kind)


def load_into(model, ckpt: Checkpoint) -> LoadReport:
    """Copy every matching tensor into ``model``; names the model lacks are reported."""
    missing, unexpected = model.load_state_dict(ckpt.tensors, strict=False)
    return LoadReport(missing, unexpected)
