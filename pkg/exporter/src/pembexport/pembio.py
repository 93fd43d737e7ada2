"""PEMB writer (little-endian).

Layout: magic "PEMB", version u16 = 1, kind u8 (0 image global, 1 text
global, 2 text tokens), dim u32, count u64; per record an id (u16 length +
UTF-8 bytes), for kind 2 a token_count u16, then the f32 values.
Files are written to a temp sibling and atomically renamed into place.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PEMB"
VERSION = 1
KIND_IMAGE_GLOBAL = 0
KIND_TEXT_GLOBAL = 1
KIND_TEXT_TOKENS = 2

_HEADER = struct.Struct("<4sHBIQ")


def write_pemb(path, kind: int, dim: int, records: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, kind, dim, len(records)))
        for rid, value in records.items():
            arr = np.asarray(value, dtype="<f4")
            rid_b = rid.encode("utf-8")
            f.write(struct.pack("<H", len(rid_b)))
            f.write(rid_b)
            if kind == KIND_TEXT_TOKENS:
                if arr.ndim != 2 or arr.shape[1] != dim or arr.shape[0] < 1:
                    raise ValueError(f"record '{rid}': token matrix must be [tokens>=1, {dim}]")
                f.write(struct.pack("<H", arr.shape[0]))
            elif arr.shape != (dim,):
                raise ValueError(f"record '{rid}': expected vector of dim {dim}")
            f.write(arr.tobytes(order="C"))
    os.replace(tmp, path)
