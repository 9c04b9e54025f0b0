"""Middlebury ``.flo`` reader and writer."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from latentflow.errors import FormatError

FLO_MAGIC = np.float32(202021.25)
HEADER_BYTES = 12


def write_flo(path, flow) -> None:
    """``flow [2, H, W]`` (u, v) -> little-endian .flo file."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise FormatError(f"flow must be [2, H, W], got {flow.shape}")
    _, h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        fh.write(np.array([w, h], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    """Read a .flo file into ``[2, H, W]`` float32."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_BYTES:
        raise FormatError(f"truncated header: {len(raw)} bytes, need {HEADER_BYTES} (at byte offset {len(raw)})")
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != FLO_MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0 (expected {float(FLO_MAGIC)})")
    w, h = (int(v) for v in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if w < 1 or h < 1:
        raise FormatError(f"invalid dimensions {w}x{h} at byte offset 4")
    need = HEADER_BYTES + 8 * w * h
    if len(raw) < need:
        raise FormatError(f"truncated payload: file ends at byte offset {len(raw)}, expected {need}")
    if len(raw) > need:
        raise FormatError(f"trailing data after byte offset {need}")
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=HEADER_BYTES).reshape(h, w, 2)
    return data.transpose(2, 0, 1).astype(np.float32)
