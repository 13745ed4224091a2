"""Flow interchange files: little-endian f32, magic 202021.25, i32 width and
height, then row-major interleaved (u, v) per pixel."""

from __future__ import annotations

import struct

import numpy as np

from ..tensor import ShapeError, Tensor

__all__ = ["FloFormatError", "read_flo", "write_flo", "FLO_MAGIC"]

FLO_MAGIC = 202021.25


class FloFormatError(ValueError):
    """Malformed flow file; message carries the failing byte offset."""


def write_flo(flow: Tensor, path) -> None:
    if flow.shape[0] != 1 or flow.shape[1] != 2:
        raise ShapeError(f"write_flo expects a single-batch (1,2,H,W) flow, got {flow.shape}")
    _, _, h, w = flow.shape
    interleaved = np.ascontiguousarray(
        flow.data[0].transpose(1, 2, 0), dtype="<f4"
    )
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(interleaved.tobytes())


def read_flo(path) -> Tensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FloFormatError(f"truncated header: {len(raw)} bytes, need 12 (offset {len(raw)})")
    (magic,) = struct.unpack_from("<f", raw, 0)
    if magic != np.float32(FLO_MAGIC):
        raise FloFormatError(f"bad magic {magic!r} at offset 0, expected {FLO_MAGIC}")
    w, h = struct.unpack_from("<ii", raw, 4)
    if w <= 0 or h <= 0:
        raise FloFormatError(f"bad dimensions {w}x{h} at offset 4")
    need = 12 + 8 * w * h
    if len(raw) != need:
        raise FloFormatError(
            f"payload length mismatch at offset {min(len(raw), need)}: file has "
            f"{len(raw)} bytes, {w}x{h} flow needs {need}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return Tensor(np.ascontiguousarray(data.transpose(2, 0, 1)).reshape(1, 2, h, w))
