"""Binary container for arrays plus a JSON header.

Layout: 8-byte magic, u32 version, u32 header length, UTF-8 JSON header,
then the raw array bytes concatenated in header order. Everything is
little-endian and the header JSON uses sorted keys, so a given payload
always produces the same bytes.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import FormatError

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "<f8"
    if arr.dtype == np.int64:
        return "<i8"
    raise FormatError(f"unsupported array dtype {arr.dtype}")


def pack_container(magic: bytes, version: int, arrays: dict, meta: dict) -> bytes:
    if len(magic) != 8:
        raise FormatError("magic must be exactly 8 bytes")
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.ndim:  # ascontiguousarray would silently promote 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        tag = _dtype_tag(arr)
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape)})
        blobs.append(arr.astype(_DTYPES[tag], copy=False).tobytes())
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    out = bytearray()
    out += magic
    out += struct.pack("<II", version, len(header))
    out += header
    for blob in blobs:
        out += blob
    return bytes(out)


def unpack_container(buf: bytes, magic: bytes, version: int):
    """Parse a container, returning (arrays, meta); strict about every byte."""
    if len(buf) < 16:
        raise FormatError("container shorter than its fixed header")
    if buf[:8] != magic:
        raise FormatError(f"bad magic {buf[:8]!r}, expected {magic!r}")
    got_version, header_len = struct.unpack("<II", buf[8:16])
    if got_version != version:
        raise FormatError(f"container version {got_version}, expected {version}")
    if len(buf) < 16 + header_len:
        raise FormatError("container truncated inside the header")
    try:
        header = json.loads(buf[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable container header: {e}") from e
    if not isinstance(header, dict) or "arrays" not in header or "meta" not in header:
        raise FormatError("container header missing required fields")
    arrays = {}
    offset = 16 + header_len
    for entry in header["arrays"]:
        name, tag, shape = entry["name"], entry["dtype"], tuple(entry["shape"])
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag!r}")
        count = 1
        for s in shape:
            count *= s
        nbytes = count * 8
        if offset + nbytes > len(buf):
            raise FormatError(f"container truncated inside array {name!r}")
        arr = np.frombuffer(buf[offset:offset + nbytes], dtype=_DTYPES[tag]).reshape(shape)
        arrays[name] = arr.copy()
        offset += nbytes
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after the declared arrays")
    return arrays, header["meta"]


def write_container(path, magic: bytes, version: int, arrays: dict, meta: dict):
    """Atomic write: the file either has the old content or the new one."""
    data = pack_container(magic, version, arrays, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def read_container(path, magic: bytes, version: int):
    with open(path, "rb") as f:
        buf = f.read()
    return unpack_container(buf, magic, version)
