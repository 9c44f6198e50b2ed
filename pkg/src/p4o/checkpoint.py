"""Checkpoint file format.

Layout of a ``.ckpt`` file, version 1:

    line 1: ``P4O-CHECKPOINT v1``
    line 2: one JSON object: ``{"version": 1, "arrays": [...], "extra": {...}}``
            where each array entry is ``{"name", "shape", "offset", "dtype"}``
    rest:   the raw blob, every array stored as 64-bit little-endian floats
            in manifest order; ``offset`` counts bytes from the blob start.

``dtype`` records the in-memory dtype to restore (float32 arrays are stored
widened to 64-bit, which is exact, and narrowed back on load). ``extra``
carries JSON-serializable run state (counters, rng states, env states).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "P4O-CHECKPOINT v1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def to_jsonable(obj):
    """Recursively convert numpy scalars/arrays so json can hold them
    exactly (Python ints are arbitrary precision, so uint64 survives)."""
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": [str(obj.dtype), list(obj.shape), obj.reshape(-1).tolist()]}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            dtype, shape, values = obj["__ndarray__"]
            return np.array(values, dtype=dtype).reshape(shape)
        return {k: from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [from_jsonable(v) for v in obj]
    return obj


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], extra: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "dtype": str(arr.dtype)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"version": VERSION, "arrays": entries, "extra": extra or {}}
    header = MAGIC + "\n" + json.dumps(manifest, sort_keys=True) + "\n"
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header.encode("utf-8"))
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.readline().decode("utf-8").rstrip("\n")
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        manifest = json.loads(f.readline().decode("utf-8"))
        if manifest.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported version {manifest.get('version')}")
        blob = f.read()
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        raw = blob[start:start + 8 * count]
        if len(raw) != 8 * count:
            raise CheckpointError(f"{path}: truncated blob for {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(shape)
        arrays[entry["name"]] = arr.astype(entry["dtype"])
    return arrays, manifest.get("extra", {})
