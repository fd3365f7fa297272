"""Versioned flat named-array checkpoint container.

Layout: 8-byte magic, u32 format version, u64 manifest length, JSON manifest,
then the raw little-endian array payloads back to back. The manifest lists
(name, shape, dtype, offset, nbytes) per array plus a free-form metadata dict.
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"PCLINKCK"
FORMAT_VERSION = 1
_DTYPES = {"<f4", "<f8", "<i8", "|u1"}


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dtype, copy=False)
        ds = _dtype_str(arr.dtype)
        if ds not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for array {name!r}")
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": ds,
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload += arr.tobytes()
    manifest = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta or {}, "arrays": entries}
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(manifest)))
        f.write(manifest)
        f.write(payload)


def load_arrays(path):
    """Returns (arrays dict, meta dict)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint container")
    version, mlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    manifest = json.loads(data[20 : 20 + mlen])
    base = 20 + mlen
    arrays = {}
    for e in manifest["arrays"]:
        start = base + e["offset"]
        raw = data[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: array {e['name']!r} payload truncated")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, manifest["meta"]


def _dtype_str(dt: np.dtype) -> str:
    s = dt.str
    if s == "|i1":
        return "|u1"
    if s in ("<f4", "<f8", "<i8", "|u1"):
        return s
    if s in (">f4", ">f8", ">i8"):
        return "<" + s[1:]
    if s == "=f4":
        return "<f4"
    return s
