"""Checkpoint container: length-prefixed JSON header + raw little-endian f64 data.

Layout: 8 bytes little-endian header length, UTF-8 JSON header, then the
concatenated tensor payloads. The header records name/shape/dtype/byte_offset
per tensor (offsets relative to the start of the data section) plus an
optional free-form ``meta`` dict for model configs. Round-trips byte-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        blob = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f64", "byte_offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    header = {"tensors": entries}
    if meta is not None:
        header["meta"] = meta
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict | None]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"checkpoint {path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    data = raw[8 + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["byte_offset"]
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64, copy=True)
    return tensors, header.get("meta")
