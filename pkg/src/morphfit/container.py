"""Binary array container used for model assets (``MFA1``) and head checkpoints (``MFH1``).

Layout (little-endian)::

    magic      4 bytes
    hdr_len    uint64
    header     hdr_len bytes of UTF-8 JSON
    payload    raw arrays, each at ``offset`` bytes from the start of the payload

The header holds ``{"meta": {...}, "arrays": [{"name", "dtype", "shape", "offset"}, ...]}``.
Every array is written as float64; the loader also accepts ``i64`` entries.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_DTYPES = {"f64": np.dtype("<f8"), "i64": np.dtype("<i8")}


class ContainerError(ValueError):
    pass


def dumps(magic: bytes, arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        manifest.append({"name": name, "dtype": "f64", "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "arrays": manifest}, sort_keys=True).encode("utf-8")
    return magic + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(data: bytes, magic: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:4] != magic:
        raise ContainerError(f"bad magic {data[:4]!r}, expected {magic!r}")
    if len(data) < 12:
        raise ContainerError("truncated header")
    (hdr_len,) = struct.unpack("<Q", data[4:12])
    if 12 + hdr_len > len(data):
        raise ContainerError("header length exceeds file size")
    try:
        header = json.loads(data[12:12 + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable header: {exc}") from exc
    payload = memoryview(data)[12 + hdr_len:]
    arrays = {}
    for entry in header.get("arrays", []):
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise ContainerError(f"array {entry.get('name')!r}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        if any(s < 0 for s in shape):
            raise ContainerError(f"array {entry['name']!r}: negative shape")
        start = int(entry["offset"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if start < 0 or start + nbytes > len(payload):
            raise ContainerError(f"array {entry['name']!r}: offset/size out of bounds")
        arrays[entry["name"]] = np.frombuffer(payload[start:start + nbytes], dtype=dtype).reshape(shape).copy()
    return arrays, header.get("meta", {})


def write(path, magic: bytes, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(magic, arrays, meta))


def read(path, magic: bytes) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes(), magic)
