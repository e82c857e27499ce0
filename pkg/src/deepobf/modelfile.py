"""Binary model files.

Layout (all integers little-endian)::

    b"DOBF" | u32 version | u64 n | n bytes UTF-8 JSON structure
    | u32 entry count | entries... | u32 CRC32 of every preceding byte

Each entry is ``u16 id length | id ("node.param") | u8 rank | u32 dims... | f32 data``.
"""

from __future__ import annotations

import os
import struct
import zlib
from typing import Dict, Tuple

import json

import numpy as np

from .errors import ChecksumError, ModelFileError, TruncatedFileError, VersionError
from .graph import ModelGraph

MAGIC = b"DOBF"
VERSION = 1


def dumps(m: ModelGraph) -> bytes:
    text = m.structure_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(text)), text]
    entries = [(node_id, pname) for node_id in m.parameterized_ids() for pname in sorted(m.params[node_id])]
    parts.append(struct.pack("<I", len(entries)))
    for node_id, pname in entries:
        arr = np.ascontiguousarray(m.params[node_id][pname], dtype="<f4")
        key = f"{node_id}.{pname}".encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save(m: ModelGraph, path) -> None:
    data = dumps(m)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file truncated while reading {what} at offset {self.pos} (needs {n} bytes)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes) -> ModelGraph:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"unsupported model file version {version} (expected {VERSION})")
    (n,) = r.unpack("<Q", "structure length")
    text = r.take(n, "structure")
    (count,) = r.unpack("<I", "entry count")
    flat: Dict[Tuple[str, str], np.ndarray] = {}
    for _ in range(count):
        (klen,) = r.unpack("<H", "entry id length")
        key = r.take(klen, "entry id").decode("utf-8")
        (rank,) = r.unpack("<B", "entry rank")
        dims = r.unpack(f"<{rank}I", "entry extents")
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * size, f"data of {key}"), dtype="<f4").reshape(dims).astype(np.float32)
        node_id, _, pname = key.rpartition(".")
        flat[(node_id, pname)] = arr
    remaining = len(buf) - r.pos
    if remaining < 4:
        raise TruncatedFileError(f"file truncated: checksum missing at offset {r.pos}")
    if remaining > 4:
        raise ChecksumError(f"{remaining - 4} unexpected bytes before the checksum")
    (stored,) = struct.unpack("<I", buf[r.pos:])
    if zlib.crc32(buf[:r.pos]) & 0xFFFFFFFF != stored:
        raise ChecksumError("checksum mismatch")
    try:
        structure = json.loads(text.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"structure section is not valid JSON: {exc}") from exc
    params: Dict[str, Dict[str, np.ndarray]] = {}
    for (node_id, pname), arr in flat.items():
        params.setdefault(node_id, {})[pname] = arr
    return ModelGraph.from_structure(structure, params)


def load(path) -> ModelGraph:
    with open(path, "rb") as fh:
        return loads(fh.read())


def read_structure_text(path) -> str:
    """The human-readable structure section of a model file, without parsing parameters."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    r.unpack("<I", "version")
    (n,) = r.unpack("<Q", "structure length")
    return r.take(n, "structure").decode("utf-8")
