"""Binary tensor blobs and named-parameter checkpoints.

Blob layout (little-endian): u32 rank, u32 per dimension, then float64 data
in row-major order. Checkpoints are a directory of one blob per parameter
plus `manifest.json` naming each parameter, its file and shape, and carrying
arbitrary metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def save_tensor(path, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        (rank,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(dims).astype(np.float64)


def _blob_name(param_name: str) -> str:
    return param_name.replace("/", "__") + ".bin"


def save_checkpoint(directory, named_arrays: dict, meta: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": FORMAT_VERSION, "params": {}, "meta": meta or {}}
    for name, arr in named_arrays.items():
        fname = _blob_name(name)
        save_tensor(directory / fname, arr)
        manifest["params"][name] = {"file": fname, "shape": list(np.shape(arr))}
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(directory):
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    named = {}
    for name, entry in manifest["params"].items():
        named[name] = load_tensor(directory / entry["file"])
    return named, manifest.get("meta", {})
