"""Binary container: magic, version, JSON header, then named float64 blocks.

Layout (all integers little-endian)::

    magic        8 bytes
    version      u32
    header_len   u32
    header       header_len bytes of UTF-8 JSON (sorted keys)
    n_blocks     u32
    per block:
        name_len u16, name (UTF-8)
        ndim     u8, dims u32 * ndim
        values   prod(dims) * <f8

Round trips are bit-exact because values are written as raw IEEE doubles.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def dumps(magic: bytes, header: Mapping, blocks: Mapping[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    head = json.dumps(dict(header), sort_keys=True).encode()
    parts = [magic, struct.pack("<II", FORMAT_VERSION, len(head)), head, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(magic: bytes, payload: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        return _loads(magic, payload)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"truncated or corrupt payload: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"truncated or corrupt payload: {exc}") from None


def _loads(magic: bytes, payload: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if payload[:8] != magic:
        raise FormatError(f"bad magic {payload[:8]!r}, expected {magic!r}")
    pos = 8
    version, head_len = struct.unpack_from("<II", payload, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    header = json.loads(payload[pos : pos + head_len].decode())
    pos += head_len
    (n_blocks,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    blocks: dict[str, np.ndarray] = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        name = payload[pos : pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<B", payload, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", payload, pos)
        pos += 4 * ndim
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        blocks[name] = arr.astype(np.float64, copy=True)
    if pos != len(payload):
        raise FormatError(f"{len(payload) - pos} trailing bytes")
    return header, blocks


def save(path: str | Path, magic: bytes, header: Mapping, blocks: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(magic, header, blocks))


def load(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(magic, Path(path).read_bytes())
