#!/usr/bin/env python3
"""
tensor_io.py — Binary tensor record format

One record file holds a named, ordered set of arrays:

    MAGIC            8 bytes  b"PGDREC1\\n"
    header length    uint64, little-endian
    header           UTF-8 JSON: {"kind", "meta", "tensors": [{"name", "shape", "dtype"}, ...]}
    payload          raw little-endian arrays, in header order, no padding

Used by checkpoints (trainer), dataset samples (data) and Z dumps (zblock).
Writes are byte-deterministic: JSON keys sorted, no timestamps.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from errors import LoadError

MAGIC = b"PGDREC1\n"

_ALLOWED = {"<f4", "<f8", "<i8", "<i4", "|u1", "|b1"}

PathLike = Union[str, Path]


def _le_dtype(arr: np.ndarray) -> np.dtype:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("<", "|", "=") else arr.dtype
    dt = np.dtype(dt.str)
    if dt.str not in _ALLOWED:
        raise LoadError(f"dtype {arr.dtype} cannot be stored in a tensor record")
    return dt


def encode_record(tensors: Dict[str, np.ndarray], *, kind: str, meta: Optional[Dict[str, Any]] = None) -> bytes:
    entries = []
    chunks = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = _le_dtype(arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str})
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    header = json.dumps({"kind": kind, "meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode_record(blob: bytes, *, source: str = "<bytes>") -> Tuple[Dict[str, np.ndarray], Dict[str, Any], str]:
    """Return (tensors, meta, kind). Any inconsistency raises LoadError."""
    if blob[:len(MAGIC)] != MAGIC:
        raise LoadError(f"{source}: bad magic, not a tensor record")
    offset = len(MAGIC)
    if len(blob) < offset + 8:
        raise LoadError(f"{source}: truncated before header length")
    (hlen,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    if len(blob) < offset + hlen:
        raise LoadError(f"{source}: truncated header (need {hlen} bytes)")
    try:
        header = json.loads(blob[offset:offset + hlen].decode("utf-8"))
        entries = header["tensors"]
        kind = str(header["kind"])
        meta = dict(header.get("meta", {}))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise LoadError(f"{source}: corrupted header ({exc})") from exc
    offset += hlen

    tensors: Dict[str, np.ndarray] = {}
    for entry in entries:
        try:
            name = str(entry["name"])
            shape = tuple(int(s) for s in entry["shape"])
            dt = np.dtype(entry["dtype"])
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"{source}: corrupted manifest entry {entry!r}") from exc
        if dt.str not in _ALLOWED or any(s < 0 for s in shape):
            raise LoadError(f"{source}: invalid manifest entry for '{name}'", name=name)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if len(blob) < offset + nbytes:
            raise LoadError(f"{source}: payload truncated inside '{name}'", name=name)
        tensors[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise LoadError(f"{source}: {len(blob) - offset} trailing bytes after payload")
    return tensors, meta, kind


def write_record(path: PathLike, tensors: Dict[str, np.ndarray], *, kind: str, meta: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_record(tensors, kind=kind, meta=meta))
    return path


def read_record(path: PathLike, *, expect_kind: Optional[str] = None) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"record not found: {path}")
    tensors, meta, kind = decode_record(path.read_bytes(), source=str(path))
    if expect_kind is not None and kind != expect_kind:
        raise LoadError(f"{path}: expected a '{expect_kind}' record, found '{kind}'")
    return tensors, meta
