"""Self-describing parameter artifact files.

Layout: magic ``BQPA``, one version byte, a little-endian uint32 header
length, a UTF-8 JSON header listing tensor names/shapes/dtypes in order, the
raw little-endian C-contiguous tensor payloads in that order, and a trailing
32-byte SHA-256 over everything before it. The format is flat and
framework-free so the orchestrator side can checksum and inspect artifacts
without this package installed.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BQPA"
VERSION = 1

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int32": "<i4",
    "int64": "<i8",
}


class ArtifactError(Exception):
    """Malformed artifact file."""


class ChecksumMismatch(ArtifactError):
    """Artifact content does not match its trailing hash."""


def write_artifact(tensors: dict[str, np.ndarray], path: Path | str) -> str:
    """Serialize named tensors; returns the content hash (hex).

    Insertion order of `tensors` is the artifact order.
    """
    entries = []
    payloads = []
    for name, array in tensors.items():
        dtype_name = str(array.dtype)
        if dtype_name not in _DTYPES:
            raise ArtifactError(f"unsupported dtype {dtype_name!r} for tensor {name!r}")
        canonical = np.ascontiguousarray(array, dtype=np.dtype(_DTYPES[dtype_name]))
        entries.append({"name": name, "shape": list(array.shape), "dtype": dtype_name})
        payloads.append(canonical.tobytes())
    header = json.dumps({"tensors": entries}, separators=(",", ":")).encode("utf-8")
    body = MAGIC + bytes([VERSION]) + struct.pack("<I", len(header)) + header + b"".join(payloads)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)
    return digest.hex()


def read_artifact(path: Path | str) -> dict[str, np.ndarray]:
    """Read tensors back, verifying magic, version, and the content hash."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 1 + 4 + 32:
        raise ArtifactError("artifact too short")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatch("artifact checksum mismatch")
    if body[:4] != MAGIC:
        raise ArtifactError("bad magic bytes")
    if body[4] != VERSION:
        raise ArtifactError(f"unsupported artifact version {body[4]}")
    (header_len,) = struct.unpack("<I", body[5:9])
    header_end = 9 + header_len
    try:
        header = json.loads(body[9:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"bad header: {exc}") from exc
    tensors: dict[str, np.ndarray] = {}
    offset = header_end
    for entry in header["tensors"]:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = dtype.itemsize * count
        chunk = body[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ArtifactError(f"truncated payload for tensor {entry['name']!r}")
        array = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = array.astype(entry["dtype"], copy=True)
        offset += nbytes
    if offset != len(body):
        raise ArtifactError("trailing bytes after last tensor payload")
    return tensors


def artifact_checksum(path: Path | str) -> str:
    """Hex content hash stored in the artifact's trailer."""
    blob = Path(path).read_bytes()
    if len(blob) < 32:
        raise ArtifactError("artifact too short")
    return blob[-32:].hex()
