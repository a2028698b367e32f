"""Binary container shared by tensors, operators and heads.

Layout::

    b"FORGE\\x01"                       6-byte magic
    uint64 little-endian               header length in bytes
    UTF-8 JSON header                  sorted keys, no whitespace
    float64 little-endian payload      arrays concatenated, row-major

The header carries ``arrays`` (name, shape, offset in float64 units), the
caller's metadata under ``meta`` and a SHA-256 ``checksum`` of the payload.
Low-rank operators store ``U`` with the singular values already folded in
(``U_r = U * s``) and ``V`` as plain right singular vectors, so a load
reproduces ``x @ U @ V.T`` without any extra scaling.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ForgeError

MAGIC = b"FORGE\x01"
FORMAT = "forge-container/1"


class ContainerError(ForgeError, ValueError):
    pass


def _canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def dumps(meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size
    payload = b"".join(chunks)
    header = {
        "format": FORMAT,
        "arrays": entries,
        "meta": meta,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = _canonical_json(header).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload


def loads(blob: bytes, verify: bool = True) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[: len(MAGIC)] != MAGIC:
        raise ContainerError("not a forge container (bad magic)")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", blob[pos : pos + 8])
    pos += 8
    header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    payload = blob[pos + hlen :]
    if header.get("format") != FORMAT:
        raise ContainerError(f"unsupported format {header.get('format')!r}")
    if verify and hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise ContainerError("payload checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arrays[entry["name"]] = flat[start : start + size].reshape(shape).astype(np.float64)
    return header["meta"], arrays


def save(path: str | Path, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> str:
    """Write a container and return the SHA-256 of the whole file."""
    blob = dumps(meta, arrays)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path, verify: bool = True) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), verify=verify)


def digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()
