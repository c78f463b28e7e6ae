"""Flat little-endian float32 tensor files with a JSON sidecar manifest.

``name.f32`` holds the raw values, ``name.json`` holds at least
``{"dtype": "f32le", "shape": [...]}`` plus any extra metadata.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

DTYPE = "f32le"


class MalformedManifest(ValueError):
    pass


def manifest_path(path: str | os.PathLike) -> Path:
    return Path(path).with_suffix(".json")


def write_tensor(path: str | os.PathLike, array, **meta) -> Path:
    path = Path(path)
    arr = np.array(array, dtype="<f4", order="C")
    path.write_bytes(arr.tobytes())
    doc = {"dtype": DTYPE, "shape": list(arr.shape), **meta}
    manifest_path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | os.PathLike) -> dict:
    mpath = manifest_path(path)
    try:
        doc = json.loads(mpath.read_text(encoding="utf-8"))
        shape = [int(n) for n in doc["shape"]]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedManifest(f"{mpath}: unreadable tensor manifest") from exc
    if doc.get("dtype") != DTYPE:
        raise MalformedManifest(f"{mpath}: dtype {doc.get('dtype')!r}, expected {DTYPE!r}")
    if any(n < 0 for n in shape):
        raise MalformedManifest(f"{mpath}: negative dimension in {shape}")
    doc["shape"] = shape
    return doc


def read_tensor(path: str | os.PathLike) -> tuple[np.ndarray, dict]:
    path = Path(path)
    doc = read_manifest(path)
    raw = path.read_bytes()
    expected = int(np.prod(doc["shape"])) * 4
    if len(raw) != expected:
        raise MalformedManifest(f"{path}: {len(raw)} bytes on disk, manifest implies {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(doc["shape"]).astype(np.float32), doc
