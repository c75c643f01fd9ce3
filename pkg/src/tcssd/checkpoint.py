"""Checkpoint container: named float32 tensors + config + frozen-name set.

On disk a checkpoint is a directory holding ``manifest.json`` (tensor
names, shapes, element offsets, frozen flags, config) and ``weights.bin``
(the packed little-endian float32 blob).  Tensors are stored sorted by
name so identical checkpoints serialize byte-identically.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    frozen_names: set[str] = field(default_factory=set)
    config: dict = field(default_factory=dict)

    def clone(self) -> "Checkpoint":
        return Checkpoint(tensors={k: v.copy() for k, v in self.tensors.items()},
                          frozen_names=set(self.frozen_names),
                          config=json.loads(json.dumps(self.config)))

    def require(self, names) -> None:
        missing = [n for n in names if n not in self.tensors]
        if missing:
            raise CheckpointError(f"missing tensor(s): {', '.join(sorted(missing))}")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    unknown_frozen = ckpt.frozen_names - set(ckpt.tensors)
    if unknown_frozen:
        raise CheckpointError(
            f"frozen names not in manifest: {', '.join(sorted(unknown_frozen))}")
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "frozen": name in ckpt.frozen_names,
        })
        offset += arr.size
        blobs.append(arr.tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config,
        "tensors": entries,
    }
    with open(os.path.join(path, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(path, WEIGHTS_NAME), "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(path) -> Checkpoint:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    weights_path = os.path.join(path, WEIGHTS_NAME)
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"missing manifest: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest {manifest_path}: {exc}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint version mismatch in {path}: {version} != {FORMAT_VERSION}")
    try:
        with open(weights_path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"missing weights blob: {weights_path}") from None
    n_floats = len(blob) // 4
    if len(blob) % 4 != 0:
        raise CheckpointError(f"weights blob in {path} is not a whole number of floats")
    flat = np.frombuffer(blob, dtype="<f4")
    tensors = {}
    frozen = set()
    total = 0
    for entry in manifest.get("tensors", []):
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if offset < 0 or offset + size > n_floats:
            raise CheckpointError(
                f"truncated blob in {path}: tensor '{name}' needs elements "
                f"[{offset}, {offset + size}) but blob has {n_floats}")
        tensors[name] = flat[offset:offset + size].reshape(shape).copy()
        if entry.get("frozen"):
            frozen.add(name)
        total += size
    if total != n_floats:
        raise CheckpointError(
            f"manifest/blob size mismatch in {path}: manifest covers {total} "
            f"floats, blob has {n_floats}")
    return Checkpoint(tensors=tensors, frozen_names=frozen,
                      config=manifest.get("config", {}))
