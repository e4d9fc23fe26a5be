"""Bit-deterministic binary checkpoint container.

Layout: magic line, 8-byte little-endian header length, UTF-8 JSON header
(sorted keys) describing metadata and array names/shapes, then the raw
little-endian float64 array payloads concatenated in header order. Identical
(meta, arrays) inputs always serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from stmrgnn.errors import CheckpointError

_MAGIC = b"STMRGNN-CKPT-1\n"


def save_checkpoint(path, meta: dict, arrays: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = [{"name": name, "shape": list(arr.shape)} for name, arr in arrays.items()]
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(_MAGIC))
            if magic != _MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint file")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            arrays: dict[str, np.ndarray] = {}
            for entry in header["arrays"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                buf = fh.read(count * 8)
                if len(buf) != count * 8:
                    raise CheckpointError(f"{path}: truncated array {entry['name']!r}")
                arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
            if fh.read(1):
                raise CheckpointError(f"{path}: trailing bytes after payload")
    except (OSError, ValueError, KeyError, struct.error) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
    return header["meta"], arrays
