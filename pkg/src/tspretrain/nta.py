"""Named tensor archive (NTA): checkpoint container for float32 tensors.

Archive layout, little-endian::

    "NTA1" | u32 version=1 | u32 count
    then per tensor, in insertion order:
        u16 name length | UTF-8 name | u8 dtype (0 = float32) | u8 rank
        | rank x u64 dims | payload (float32, C order)

Every ``foo.nta`` is accompanied by ``foo.manifest``, a text file of sorted
``key=value`` lines carrying configuration and provenance.  Both files are
written atomically (temp file + rename) so an interrupted save never leaves
a half-written checkpoint behind.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .data import _atomic_write
from .errors import HeaderInconsistent, MagicMismatch, TruncatedFile

NTA_MAGIC = b"NTA1"
NTA_VERSION = 1
_DTYPE_F32 = 0


def manifest_path(path: str) -> str:
    root, _ = os.path.splitext(path)
    return root + ".manifest"


def format_manifest(entries: dict) -> str:
    lines = []
    for key in sorted(entries):
        value = str(entries[key])
        if "\n" in key or "\n" in value or "=" in key:
            raise ValueError(f"manifest entry {key!r} contains forbidden characters")
        lines.append(f"{key}={value}\n")
    return "".join(lines)


def parse_manifest(text: str, path: str = "manifest") -> dict:
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise HeaderInconsistent(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        if key in entries:
            raise HeaderInconsistent(f"{path}:{lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def save_nta(path: str, tensors: dict, manifest: dict | None = None):
    parts = [NTA_MAGIC, struct.pack("<II", NTA_VERSION, len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array)
        if array.dtype != np.float32:
            raise ValueError(f"tensor {name!r} has dtype {array.dtype}; archives hold float32 only")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", _DTYPE_F32, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    _atomic_write(path, b"".join(parts))
    _atomic_write(manifest_path(path), format_manifest(manifest or {}).encode("utf-8"))


def load_nta(path: str) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(offset, n):
        if offset + n > len(blob):
            raise TruncatedFile(f"{path}: expected {n} more bytes at offset {offset}")
        return blob[offset : offset + n], offset + n

    chunk, offset = take(0, 4)
    if chunk != NTA_MAGIC:
        raise MagicMismatch(f"{path}: bad magic {chunk!r}, expected {NTA_MAGIC!r}")
    chunk, offset = take(offset, 8)
    version, count = struct.unpack("<II", chunk)
    if version != NTA_VERSION:
        raise HeaderInconsistent(f"{path}: unsupported version {version}")
    tensors = {}
    for _ in range(count):
        chunk, offset = take(offset, 2)
        (name_len,) = struct.unpack("<H", chunk)
        chunk, offset = take(offset, name_len)
        name = chunk.decode("utf-8")
        if name in tensors:
            raise HeaderInconsistent(f"{path}: duplicate tensor name {name!r}")
        chunk, offset = take(offset, 2)
        dtype_code, rank = struct.unpack("<BB", chunk)
        if dtype_code != _DTYPE_F32:
            raise HeaderInconsistent(f"{path}: unknown dtype code {dtype_code} for {name!r}")
        chunk, offset = take(offset, 8 * rank)
        dims = struct.unpack(f"<{rank}Q", chunk) if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        chunk, offset = take(offset, 4 * size)
        tensors[name] = np.frombuffer(chunk, dtype="<f4").reshape(dims).astype(np.float32)
    if offset != len(blob):
        raise HeaderInconsistent(f"{path}: {len(blob) - offset} trailing bytes after last tensor")

    mpath = manifest_path(path)
    if os.path.exists(mpath):
        with open(mpath, "r", encoding="utf-8") as fh:
            manifest = parse_manifest(fh.read(), mpath)
    else:
        manifest = {}
    return tensors, manifest
