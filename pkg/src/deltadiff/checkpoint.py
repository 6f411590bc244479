"""Checkpoint directories: a JSON manifest plus raw float64 blobs.

Every persisted artifact (models, record stores, diffusion bundles) uses
this convention: `manifest.json` carries metadata and the tensor table;
each tensor lives in its own little-endian float64 file, row-major, so
round-trips are bit-exact.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"


class CheckpointError(RuntimeError):
    pass


def _safe_filename(name: str, used: set) -> str:
    base = re.sub(r"[^A-Za-z0-9_.-]+", "_", name) or "tensor"
    candidate = f"{base}.f64"
    k = 1
    while candidate in used:
        candidate = f"{base}_{k}.f64"
        k += 1
    used.add(candidate)
    return candidate


def save_checkpoint(directory, tensors: dict, meta: dict) -> Path:
    """Write tensors + metadata; returns the directory path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = {}
    used: set = set()
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        fname = _safe_filename(name, used)
        (directory / fname).write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        table[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"meta": meta, "tensors": table}
    (directory / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    return directory


def load_checkpoint(directory) -> tuple:
    """Read back (tensors, meta). Raises CheckpointError on malformed data."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise CheckpointError(f"no {MANIFEST_NAME} in {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    tensors = {}
    for name, entry in manifest["tensors"].items():
        raw = (directory / entry["file"]).read_bytes()
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape)) if shape else 1
        flat = np.frombuffer(raw, dtype="<f8")
        if flat.size != expected:
            raise CheckpointError(
                f"tensor {name}: file holds {flat.size} values, shape {shape} "
                f"needs {expected}"
            )
        tensors[name] = flat.reshape(shape).astype(np.float64)
    return tensors, manifest["meta"]


def checkpoint_exists(directory) -> bool:
    return (Path(directory) / MANIFEST_NAME).is_file()
