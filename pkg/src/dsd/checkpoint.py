"""Flat binary container for named float64 arrays plus a JSON header.

Layout (all integers little-endian)::

    magic    8 bytes   b"DSDCKPT\\0"
    version  uint32
    hlen     uint32    length of the UTF-8 JSON header
    header   hlen bytes (config echo and run metadata)
    nblocks  uint32
    repeated nblocks times:
        name_len uint16, name (UTF-8)
        ndim     uint8,  dims (uint32 each)
        data     prod(dims) float64 little-endian values

Arrays are written bit-for-bit, so load(save(x)) reproduces x exactly.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSDCKPT\x00"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], header: dict) -> Path:
    path = Path(path)
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hdr)))
        fh.write(hdr)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())
    return path


def _read(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("checkpoint file is truncated")
    return buf


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with path.open("rb") as fh:
        if _read(fh, len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", _read(fh, 8))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(_read(fh, hlen).decode("utf-8"))
        (n,) = struct.unpack("<I", _read(fh, 4))
        arrays = {}
        for _ in range(n):
            (ln,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, ln).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read(fh, 1))
            shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(_read(fh, 8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise ValueError("trailing bytes after the last checkpoint block")
    return header, arrays
