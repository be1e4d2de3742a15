"""Magic-tagged binary container: JSON header plus raw little-endian tensors.

Layout: 8-byte magic, uint64-le header length, UTF-8 JSON header, then the
tensor payloads back to back in table order. The header carries a
"tensors" table of {name, dtype, shape, byte_offset, byte_length} with
offsets relative to the end of the header. Writers emit canonical JSON so
identical content produces identical bytes.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

_LEN = struct.Struct("<Q")
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class ContainerError(ValueError):
    """Corrupt or mismatched container file."""


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def write_container(path, magic: bytes, header: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    table = []
    offset = 0
    blobs = []
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {arr.dtype} for '{name}'")
        blob = arr.astype(_DTYPES[arr.dtype.name], copy=False).tobytes()
        table.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "byte_offset": offset,
                "byte_length": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    full_header = dict(header)
    full_header["tensors"] = table
    payload = _canonical_json(full_header)

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(magic)
        f.write(_LEN.pack(len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:8] != magic:
        raise ContainerError(f"bad magic in {path}: expected {magic!r}")
    (header_len,) = _LEN.unpack(raw[8:16])
    if 16 + header_len > len(raw):
        raise ContainerError(f"truncated header in {path}")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"unreadable header in {path}: {e}") from e
    body = raw[16 + header_len :]

    tensors: dict[str, np.ndarray] = {}
    expected = 0
    for entry in header.get("tensors", []):
        name, dtype, shape = entry["name"], entry["dtype"], tuple(entry["shape"])
        off, length = entry["byte_offset"], entry["byte_length"]
        if dtype not in _DTYPES:
            raise ContainerError(f"unknown dtype '{dtype}' for tensor '{name}'")
        itemsize = np.dtype(_DTYPES[dtype]).itemsize
        n = int(np.prod(shape)) if shape else 1
        if length != n * itemsize or off + length > len(body) or off != expected:
            raise ContainerError(f"corrupt tensor table entry for '{name}'")
        expected = off + length
        arr = np.frombuffer(body[off : off + length], dtype=_DTYPES[dtype]).reshape(shape)
        tensors[name] = arr.astype(dtype, copy=True)
    if expected != len(body):
        raise ContainerError(f"payload size mismatch in {path}")
    return header, tensors
