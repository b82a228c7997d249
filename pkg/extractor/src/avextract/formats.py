"""Writer for the detector's feature container and manifest.

Layout (little-endian): magic "AVFE", version u32, N u32, d u32, modality
tag u8, N*d float32 row-major, CRC32 of the payload. Manifests are JSON
lines. The byte layout is the contract between this package and the
detector; nothing else is shared.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ExtractError

MAGIC = b"AVFE"
VERSION = 1
MODALITY_TAGS = {"visual": 0, "audio": 1, "scores": 2, "class_embeddings": 3}

_HEADER = struct.Struct("<4sIIIB")


def write_features(path, data: np.ndarray, modality: str) -> None:
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ExtractError(f"features must be N x d with N,d >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ExtractError(f"non-finite feature values for {path}")
    payload = arr.tobytes()
    header = _HEADER.pack(MAGIC, VERSION, arr.shape[0], arr.shape[1], MODALITY_TAGS[modality])
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(header + payload + struct.pack("<I", crc))


def append_manifest_line(path, row: dict) -> None:
    # single write call per line; concurrent extractors append whole lines
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(row) + "\n")
