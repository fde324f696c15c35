"""JDMP parameter checkpoints.

Layout: ``b"JDMP"``, u32 version, u32 manifest length, UTF-8 JSON manifest,
then little-endian float32 payloads.  The manifest is
``{"tensors": {name: {"shape": [...], "offset": bytes}}, "meta": {...}}``
with offsets relative to the start of the payload block.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"JDMP"
VERSION = 1


def save_params(path, params: dict, meta: dict | None = None) -> None:
    tensors = {}
    chunks = []
    offset = 0
    for name in sorted(params):
        value = params[name]
        arr = np.asarray(getattr(value, "data", value), dtype="<f4")
        tensors[name] = {"shape": list(arr.shape), "offset": offset}
        raw = arr.tobytes(order="C")
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": tensors, "meta": meta or {}},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(manifest)))
        fh.write(manifest)
        for raw in chunks:
            fh.write(raw)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, meta)``; arrays are float64."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    version, mlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(blob) < 12 + mlen:
        raise FormatError(f"{path}: truncated manifest")
    manifest = json.loads(blob[12:12 + mlen].decode("utf-8"))
    payload = memoryview(blob)[12 + mlen:]
    arrays = {}
    for name, entry in manifest["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise FormatError(f"{path}: payload for {name!r} truncated")
        arrays[name] = np.frombuffer(payload[start:end], dtype="<f4").astype(np.float64).reshape(shape)
    return arrays, manifest.get("meta", {})
