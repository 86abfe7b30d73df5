"""Single-file tensor archive used for checkpoints and feature-extractor weights.

Layout (all integers little-endian)::

    magic        4 bytes   b"RGVT"
    version      uint32
    meta_len     uint32    length of the UTF-8 JSON metadata block
    meta         bytes     JSON object (sorted keys)
    count        uint32    number of tensors
    per tensor:
        name_len uint16, name (UTF-8)
        ndim     uint8, dims uint32 * ndim
        data     float32 * prod(dims), little-endian, C order

Every tensor is stored as 32-bit float whatever its in-memory dtype; callers
cast back on load.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RGVT"
VERSION = 1


class ArchiveError(ValueError):
    """Raised for corrupt or incompatible archive files."""


def dumps(tensors: dict[str, torch.Tensor], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4", copy=False).tobytes(order="C"))
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ArchiveError("truncated archive")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ArchiveError("not a tensor archive (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version} (expected {VERSION})")
    try:
        meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"corrupt metadata block: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        numel = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(take(4 * numel), dtype="<f4").reshape(dims)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(view):
        raise ArchiveError("trailing bytes after last tensor")
    return tensors, meta


def save(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(tensors, meta))
    tmp.replace(path)


def load(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    return loads(Path(path).read_bytes())
