"""
Single-file binary checkpoints, little-endian throughout:

    header   magic "EVMO", u32 version, u32 blob count
    blob     u32 name length, name (utf-8), u32 ndim, u64 dims..., f64 data
    trailer  u32 length, JSON metadata (iteration, optimizer step, rng states, config)
"""

import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"EVMO"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def encode(blobs, meta):
    parts = [_HEADER.pack(MAGIC, VERSION, len(blobs))]
    for name, array in blobs.items():
        array = np.ascontiguousarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(array.ndim))
        parts.extend(_U64.pack(dim) for dim in array.shape)
        parts.append(array.tobytes())
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(_U32.pack(len(text)))
    parts.append(text)
    return b"".join(parts)


class _Reader:
    def __init__(self, payload):
        self.payload = payload
        self.offset = 0

    def take(self, size, what):
        end = self.offset + size
        if end > len(self.payload):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.offset}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt, what):
        return fmt.unpack(self.take(fmt.size, what))


def decode(payload):
    reader = _Reader(payload)
    magic, version, count = reader.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    blobs = {}
    for index in range(count):
        (name_len,) = reader.unpack(_U32, f"blob {index} name length")
        try:
            name = reader.take(name_len, f"blob {index} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"blob {index} name is not utf-8") from exc
        (ndim,) = reader.unpack(_U32, f"{name} ndim")
        shape = tuple(reader.unpack(_U64, f"{name} shape")[0] for _ in range(ndim))
        size = math.prod(shape)
        if 8 * size > len(payload) - reader.offset:
            raise CheckpointError(f"{name} claims shape {shape}, more data than the {len(payload) - reader.offset} bytes left")
        data = reader.take(8 * size, f"{name} data")
        try:
            blobs[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
        except (ValueError, OverflowError) as exc:
            raise CheckpointError(f"{name} has an unusable shape {shape}: {exc}") from exc
    (meta_len,) = reader.unpack(_U32, "metadata length")
    try:
        meta = json.loads(reader.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint metadata: {exc}") from exc
    if reader.offset != len(payload):
        raise CheckpointError(f"{len(payload) - reader.offset} trailing bytes after metadata")
    return blobs, meta


def save(path, blobs, meta):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(blobs, meta))
    tmp.replace(path)
    return path


def load(path):
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(payload)
