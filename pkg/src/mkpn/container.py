"""Self-describing binary container for named arrays plus JSON metadata.

Layout, all integers little-endian:

    bytes 0..4    magic b"MKPN"
    u32           format version (currently 1)
    u64           length of the metadata JSON blob
    bytes         metadata JSON (canonical: sorted keys, compact separators)
    u64           length of the tensor-table JSON blob
    bytes         table JSON: list of {name, dtype, shape, offset}
    bytes         payloads, little-endian, packed in table order

Offsets are relative to the start of the payload section.  Writing is
canonical (names sorted), so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

__all__ = ["ContainerError", "save_tensors", "load_tensors", "FORMAT_VERSION", "MAGIC"]

MAGIC = b"MKPN"
FORMAT_VERSION = 1

_DTYPES = {
    np.dtype(np.float64): "<f8",
    np.dtype(np.float32): "<f4",
    np.dtype(np.int64): "<i8",
}
_DTYPES_BACK = {v: np.dtype(v) for v in _DTYPES.values()}


class ContainerError(ValueError):
    """Malformed or unsupported container file."""


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_tensors(path, meta: dict, tensors: Dict[str, np.ndarray]) -> None:
    table = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        code = _DTYPES.get(arr.dtype)
        if code is None:
            raise ContainerError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset})
        payloads.append(data)
        offset += len(data)

    meta_blob = _canonical_json(meta)
    table_blob = _canonical_json(table)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(meta_blob)))
        f.write(meta_blob)
        f.write(struct.pack("<Q", len(table_blob)))
        f.write(table_blob)
        for data in payloads:
            f.write(data)


def load_tensors(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise ContainerError(f"{path}: not a container file (bad magic)")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")

    pos = 8
    try:
        meta_len = struct.unpack_from("<Q", raw, pos)[0]
        pos += 8
        meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        table_len = struct.unpack_from("<Q", raw, pos)[0]
        pos += 8
        table = json.loads(raw[pos:pos + table_len].decode("utf-8"))
        pos += table_len
    except (struct.error, ValueError) as e:
        raise ContainerError(f"{path}: truncated or corrupt header: {e}") from None

    payload = raw[pos:]
    tensors: Dict[str, np.ndarray] = {}
    for entry in table:
        try:
            name, code = entry["name"], entry["dtype"]
            shape = tuple(entry["shape"])
            off = entry["offset"]
        except (KeyError, TypeError):
            raise ContainerError(f"{path}: malformed table entry {entry!r}") from None
        dtype = _DTYPES_BACK.get(code)
        if dtype is None:
            raise ContainerError(f"{path}: unsupported dtype code {code!r}")
        count = int(np.prod(shape, dtype=np.int64))
        if off < 0 or off + dtype.itemsize * count > len(payload):
            raise ContainerError(f"{path}: payload for {name!r} out of bounds")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=off)
        tensors[name] = arr.reshape(shape).copy()
    return meta, tensors
