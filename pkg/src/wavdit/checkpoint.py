"""Checkpoints: a directory holding ``manifest.json`` and one float32 blob.

The manifest maps every tensor name to ``{shape, dtype, offset}`` (offset in
elements, contiguous and in sorted-name order) and carries free-form
metadata (step, config digest, RNG states).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

MANIFEST = "manifest.json"
BLOB = "tensors.f32"


class CheckpointError(ValueError):
    pass


def _to_numpy(value) -> np.ndarray:
    if torch.is_tensor(value):
        value = value.detach().cpu().numpy()
    return np.array(value, dtype="<f4", order="C")  # keeps 0-d shapes, unlike ascontiguousarray


def save_checkpoint(path: str | Path, tensors: dict, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        entries[name] = {"shape": list(arr.shape), "dtype": "f32le", "offset": offset}
        chunks.append(arr.reshape(-1).tobytes())
        offset += arr.size
    doc = {"tensors": entries, "metadata": metadata or {}, "total_elements": offset}
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        doc = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        entries = doc["tensors"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint manifest") from exc
    blob = np.frombuffer((path / BLOB).read_bytes(), dtype="<f4")
    expected = 0
    tensors = {}
    for name in sorted(entries, key=lambda n: entries[n]["offset"]):
        e = entries[name]
        size = int(np.prod(e["shape"]))
        if e["offset"] != expected:
            raise CheckpointError(f"{path}: tensor {name!r} is not contiguous with its predecessor")
        if expected + size > blob.size:
            raise CheckpointError(f"{path}: blob ends before tensor {name!r}")
        tensors[name] = blob[expected:expected + size].reshape(e["shape"]).copy()
        expected += size
    if expected != blob.size:
        raise CheckpointError(f"{path}: blob holds {blob.size} elements, manifest describes {expected}")
    return tensors, doc.get("metadata", {})


def module_tensors(prefix: str, module: torch.nn.Module) -> dict:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, tensors: dict) -> None:
    state = {k[len(prefix) + 1:]: torch.from_numpy(v) for k, v in tensors.items()
             if k.startswith(prefix + ".")}
    module.load_state_dict(state, strict=True)
