"""Checkpoint layout: ``<stem>.json`` manifest + ``<stem>.bin`` little-endian float64 blob.

The manifest lists ``{name, shape, offset}`` (offset in bytes) in lexicographic
name order. Parameters and normalization buffers share one namespace.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def save_checkpoint(state: dict[str, np.ndarray], path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    stem = path.with_suffix("")
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    blob = stem.with_suffix(".bin")
    blob.write_bytes(b"".join(chunks))
    manifest = {"format": "lgdet-ckpt-1", "blob": blob.name, "tensors": entries}
    if meta is not None:
        manifest["meta"] = meta
    man = stem.with_suffix(".json")
    man.write_text(json.dumps(manifest, indent=1))
    return man


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    man = Path(path).with_suffix(".json")
    manifest = json.loads(man.read_text())
    raw = (man.parent / manifest["blob"]).read_bytes()
    state = {}
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=e["offset"]).reshape(shape)
        state[e["name"]] = arr.astype(np.float64)
    return state, manifest.get("meta", {})
