"""Versioned binary parameter container ("FFWT").

Layout, all little-endian:

    magic   4 bytes  b"FFWT"
    version u32      currently 1
    hlen    u32      length of the UTF-8 JSON header (may be ``{}``)
    header  hlen bytes; model checkpoints embed the architecture config
    count   u32      number of parameter records
    per parameter, in canonical model order:
        nlen  u32, name utf-8, shape 4 x u32, f32 data little-endian

The header carries the model config so evaluation can reject checkpoints
whose architecture disagrees with the requested one.
"""

from __future__ import annotations

import json
import struct

import numpy as np

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]

MAGIC = b"FFWT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], header: dict | None = None) -> None:
    """Write named parameters (dict preserves canonical order) plus header."""
    hbytes = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            if arr.ndim != 4:
                raise CheckpointError(f"parameter {name!r} is not 4-D: shape {arr.shape}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<4I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read (header, parameters); parameters keep file order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"not a parameter container (bad magic {raw[:4]!r})")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    off = 12
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8")) if hlen else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    off += hlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        shape = struct.unpack_from("<4I", raw, off)
        off += 16
        size = int(np.prod(shape))
        data = np.frombuffer(raw, dtype="<f4", count=size, offset=off)
        off += 4 * size
        params[name] = data.reshape(shape).copy()
    if off != len(raw):
        raise CheckpointError(f"trailing bytes after parameter records (offset {off})")
    return header, params
