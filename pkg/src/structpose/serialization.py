"""Self-describing binary bundles: magic, version byte, JSON header, raw arrays.

Layout::

    magic (8 bytes) | version (1 byte) | header length (uint32 LE) | header JSON | array bytes

The header lists every array's name, dtype, shape and byte offset into the
payload.  JSON is written with sorted keys so equal content gives equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class BundleError(ValueError):
    pass


def encode_bundle(magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)  # ascontiguousarray would promote 0-d arrays to 1-d
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    return magic + bytes([version]) + struct.pack("<I", len(header)) + header + b"".join(blobs)


def decode_bundle(data: bytes, magic: bytes, versions: tuple[int, ...]) -> tuple[int, dict, dict[str, np.ndarray]]:
    if len(data) < 13 or data[:8] != magic:
        raise BundleError(f"bad magic {data[:8]!r}, expected {magic!r}")
    version = data[8]
    if version not in versions:
        raise BundleError(f"unsupported format version {version}")
    (hlen,) = struct.unpack("<I", data[9:13])
    try:
        header = json.loads(data[13 : 13 + hlen])
        entries = header["arrays"]
    except (ValueError, KeyError, TypeError) as exc:
        raise BundleError(f"corrupt header: {exc}") from exc
    payload = memoryview(data)[13 + hlen :]
    arrays = {}
    for e in entries:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if e["offset"] + n > len(payload):
            raise BundleError(f"truncated payload for array {e['name']!r}")
        buf = payload[e["offset"] : e["offset"] + n]
        arrays[e["name"]] = np.frombuffer(buf, dtype=dt).reshape(e["shape"]).copy()
    return version, header["meta"], arrays


def write_bundle(path, magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_bundle(magic, version, meta, arrays))


def read_bundle(path, magic: bytes, versions: tuple[int, ...]):
    return decode_bundle(Path(path).read_bytes(), magic, versions)
