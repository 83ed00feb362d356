"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"FMIMCKPT"
    version      u16       FORMAT_VERSION
    header_len   u32
    header       header_len bytes of UTF-8 JSON, keys sorted:
                 {"format_version", "config", "schema": [[name, shape], ...]}
    payload      every parameter as float32 LE, flattened row-major, schema order
    crc32        u32 over every preceding byte

Encoding is a pure function of (config, parameters), so equal weights give
byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib

import numpy as np

from fedmim.tensor import Tensor

MAGIC = b"FMIMCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sHI")


class CheckpointError(ValueError):
    pass


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v)


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(params: dict, config: dict | None = None) -> bytes:
    arrays = {k: _as_array(v) for k, v in params.items()}
    header = canonical_json({
        "format_version": FORMAT_VERSION,
        "config": config or {},
        "schema": [[k, list(a.shape)] for k, a in arrays.items()],
    })
    parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)), header]
    parts.extend(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays.values())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Inverse of :func:`encode`; returns ``(config, {name: float32 array})``."""
    if len(blob) < _PREFIX.size + 4:
        raise CheckpointError("checkpoint truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    magic, version, hlen = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(body[_PREFIX.size:_PREFIX.size + hlen])
    offset = _PREFIX.size + hlen
    params = {}
    for name, shape in header["schema"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(body):
            raise CheckpointError(f"checkpoint payload truncated at {name}")
        params[name] = np.frombuffer(body[offset:end], dtype="<f4").astype(np.float32).reshape(shape)
        offset = end
    if offset != len(body):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return header["config"], params


def save(path, params: dict, config: dict | None = None) -> str:
    """Write atomically; returns the content hash."""
    blob = encode(params, config)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return content_hash(blob)


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def content_hash(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return content_hash(fh.read())
