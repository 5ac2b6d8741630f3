"""Versioned binary container shared by dataset files and checkpoints.

Layout::

    magic (8 bytes) | version u32 | header length u64 | header JSON
    | array payload (little-endian, in header order) | sha256 of everything before

The header is canonical JSON (sorted keys, no whitespace) so identical
content always produces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class ContainerError(ValueError):
    """Raised when a container file is truncated, corrupted, or of the wrong kind."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def encode(magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    specs = []
    chunks = []
    for name, arr in arrays.items():
        arr = _le(np.asarray(arr))
        specs.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    head = canonical_json({"meta": header, "arrays": specs})
    body = _PREFIX.pack(magic, VERSION, len(head)) + head + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size + 32:
        raise ContainerError("file too short to be a container")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError("checksum mismatch (corrupted or truncated file)")
    got_magic, version, head_len = _PREFIX.unpack_from(body)
    if got_magic != magic:
        raise ContainerError(f"wrong file kind: expected {magic!r}, found {got_magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    start = _PREFIX.size
    try:
        head = json.loads(body[start:start + head_len])
    except ValueError as exc:
        raise ContainerError(f"unreadable header: {exc}") from exc
    offset = start + head_len
    arrays = {}
    for spec in head["arrays"]:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(body):
            raise ContainerError(f"array {spec['name']!r} runs past end of file")
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
        arrays[spec["name"]] = arr.reshape(spec["shape"]).astype(dtype.newbyteorder("="))
        offset += nbytes
    if offset != len(body):
        raise ContainerError("trailing bytes after payload")
    return head["meta"], arrays


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write(path, encode(magic, header, arrays))


def read(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode(fh.read(), magic)
