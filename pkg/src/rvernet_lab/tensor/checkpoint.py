"""Parameter checkpoints.

Layout: 8-byte little-endian header length, a UTF-8 JSON header, then the
parameters as one flat run of little-endian float32 values.  The header
lists ``{"name", "shape", "offset"}`` per parameter, ``offset`` counted in
float32 elements from the start of the data section.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = "rvernet-ckpt"


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.reshape(-1).tobytes())
        offset += arr.size
    header = {"format": MAGIC, "version": 1, "dtype": "<f4",
              "params": entries, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``({name: float32 array}, meta)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    if header.get("format") != MAGIC:
        raise ValueError(f"{path}: not an {MAGIC} file")
    data = np.frombuffer(raw[8 + hlen:], dtype="<f4")
    params = {}
    for e in header["params"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        chunk = data[e["offset"]:e["offset"] + size]
        if chunk.size != size:
            raise ValueError(f"{path}: parameter {e['name']} runs past end of file")
        params[e["name"]] = chunk.reshape(e["shape"]).astype(np.float32)
    return params, header.get("meta", {})
