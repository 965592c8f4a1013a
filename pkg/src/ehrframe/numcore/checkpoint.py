"""Checkpoint files: a JSON manifest plus a little-endian float32 blob.

``<stem>.json`` maps each parameter name to ``{"shape", "offset"}`` (byte
offset into the blob) in storage order; ``<stem>.bin`` holds the raw values
concatenated in that same order. Free-form metadata rides along in the
manifest under ``"meta"``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_TAG = "ehrframe-checkpoint/1"
_LE_F32 = np.dtype("<f4")


def _paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_arrays(stem: str | Path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(np.asarray(arr), dtype=_LE_F32).tobytes()
            entries[name] = {"shape": list(np.shape(arr)), "offset": offset}
            fh.write(raw)
            offset += len(raw)
    manifest = {"format": FORMAT_TAG, "dtype": "<f4", "total_bytes": offset,
                "params": entries, "meta": meta or {}}
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path


def load_arrays(stem: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path, blob_path = _paths(stem)
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT_TAG:
        raise ValueError(f"unrecognised checkpoint format in {manifest_path}")
    blob = blob_path.read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise ValueError(f"checkpoint blob {blob_path} is truncated")
    arrays = {}
    for name, entry in manifest["params"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=_LE_F32, count=count, offset=entry["offset"])
        arrays[name] = arr.reshape(shape).astype(np.float32)
    return arrays, manifest.get("meta", {})
