"""PEMB binary embedding interchange format.

Little-endian layout:

    magic   "PEMB"  (4 bytes)
    version u16     (currently 1)
    kind    u8      (0 = image global, 1 = text global, 2 = text tokens)
    dim     u32
    count   u64
    then per record:
        id_len u16, id (UTF-8 bytes)
        kind 2 only: token_count u16
        dim f32 values (times token_count for kind 2)

Ids are post ids in dataset files and class names in prototype files.
Values are stored as f32; in-memory tables are f64, so a table round-trips
exactly only if its values are f32-representable (they are whenever the
table was read from a PEMB file).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PEMB"
VERSION = 1
KIND_IMAGE_GLOBAL = 0
KIND_TEXT_GLOBAL = 1
KIND_TEXT_TOKENS = 2

_HEADER = struct.Struct("<4sHBIQ")


class PembError(ValueError):
    """Structural problem in a PEMB file."""


def write_pemb(path, kind: int, dim: int, records: dict[str, np.ndarray]) -> None:
    """Write one PEMB file. For kind 2 each value is a [tokens, dim] matrix,
    otherwise a [dim] vector."""
    if kind not in (KIND_IMAGE_GLOBAL, KIND_TEXT_GLOBAL, KIND_TEXT_TOKENS):
        raise PembError(f"unknown kind {kind}")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, kind, dim, len(records)))
        for rid, value in records.items():
            arr = np.asarray(value, dtype=np.float32)
            rid_b = rid.encode("utf-8")
            f.write(struct.pack("<H", len(rid_b)))
            f.write(rid_b)
            if kind == KIND_TEXT_TOKENS:
                if arr.ndim != 2 or arr.shape[1] != dim or arr.shape[0] < 1:
                    raise PembError(f"record '{rid}': token matrix must be [tokens>=1, {dim}]")
                f.write(struct.pack("<H", arr.shape[0]))
            else:
                if arr.shape != (dim,):
                    raise PembError(f"record '{rid}': expected vector of dim {dim}, got {arr.shape}")
            f.write(arr.tobytes(order="C"))


def read_pemb(path) -> tuple[int, int, dict[str, np.ndarray]]:
    """Read one PEMB file; returns (kind, dim, records). Values come back
    as f64 arrays."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise PembError(f"{path.name}: truncated header")
    magic, version, kind, dim, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise PembError(f"{path.name}: bad magic")
    if version != VERSION:
        raise PembError(f"{path.name}: unsupported version {version}")
    if kind not in (KIND_IMAGE_GLOBAL, KIND_TEXT_GLOBAL, KIND_TEXT_TOKENS):
        raise PembError(f"{path.name}: unknown kind {kind}")
    records: dict[str, np.ndarray] = {}
    off = _HEADER.size
    for _ in range(count):
        if off + 2 > len(raw):
            raise PembError(f"{path.name}: truncated file")
        (id_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        if off + id_len > len(raw):
            raise PembError(f"{path.name}: truncated file")
        rid = raw[off:off + id_len].decode("utf-8")
        off += id_len
        if kind == KIND_TEXT_TOKENS:
            if off + 2 > len(raw):
                raise PembError(f"{path.name}: truncated file")
            (tokens,) = struct.unpack_from("<H", raw, off)
            off += 2
            if tokens < 1:
                raise PembError(f"{path.name}: record '{rid}' has zero tokens")
            nbytes = 4 * dim * tokens
            if off + nbytes > len(raw):
                raise PembError(f"{path.name}: truncated file")
            arr = np.frombuffer(raw, dtype="<f4", count=dim * tokens, offset=off)
            records[rid] = arr.reshape(tokens, dim).astype(np.float64)
        else:
            nbytes = 4 * dim
            if off + nbytes > len(raw):
                raise PembError(f"{path.name}: truncated file")
            arr = np.frombuffer(raw, dtype="<f4", count=dim, offset=off)
            records[rid] = arr.astype(np.float64)
        off += nbytes
        if not np.all(np.isfinite(records[rid])):
            raise PembError(f"{path.name}: non-finite values in record '{rid}'")
    if off != len(raw):
        raise PembError(f"{path.name}: {len(raw) - off} trailing bytes")
    return kind, dim, records


# file names used for a full per-post embedding set
IMAGE_FILE = "image_global.pemb"
TEXT_FILE = "text_global.pemb"
TOKENS_FILE = "text_tokens.pemb"
