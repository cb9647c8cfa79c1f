"""Binary archive of fitted TSDF-Def tensors (`.ncgt`).

Layout (little-endian): "NCGT", version u8, K u16, count u32, then one
block of K^3*4 float32 values per shape in (u, v, w, channel) C order.
A trailer after the last block holds the shape names, each as a u16
length plus utf-8 bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .rgr.grid import GridSpec, TsdfDefTensor

MAGIC = b"NCGT"
VERSION = 1


class ArchiveError(ValueError):
    pass


def save_tensors(path, names: Sequence[str], tensors: Sequence[TsdfDefTensor]) -> None:
    if len(names) != len(tensors):
        raise ValueError("one name per tensor is required")
    ks = {t.grid.resolution for t in tensors}
    if len(ks) > 1:
        raise ValueError("all tensors in an archive must share K")
    k = ks.pop() if ks else 0
    chunks = [MAGIC, struct.pack("<BHI", VERSION, k, len(tensors))]
    for t in tensors:
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    for name in names:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> Tuple[List[str], List[TsdfDefTensor]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ArchiveError(f"{path} is not a tensor archive")
    if len(data) < 11:
        raise ArchiveError("truncated archive header")
    version, k, count = struct.unpack_from("<BHI", data, 4)
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    pos = 11
    block = k**3 * 4 * 4
    if pos + count * block > len(data):
        raise ArchiveError("truncated archive")
    try:
        grid = GridSpec(k) if count else None
    except ValueError as exc:
        raise ArchiveError(f"invalid resolution in archive: {exc}") from exc
    tensors = []
    for _ in range(count):
        vals = np.frombuffer(data, dtype="<f4", count=k**3 * 4, offset=pos)
        tensors.append(TsdfDefTensor(grid, vals.reshape(k, k, k, 4).astype(np.float64)))
        pos += block
    names = []
    for _ in range(count):
        if pos + 2 > len(data):
            raise ArchiveError("truncated name trailer")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + n > len(data):
            raise ArchiveError("truncated name trailer")
        names.append(data[pos : pos + n].decode("utf-8"))
        pos += n
    if pos != len(data):
        raise ArchiveError("trailing bytes after the name trailer")
    return names, tensors
