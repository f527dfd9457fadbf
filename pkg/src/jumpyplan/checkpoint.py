"""Parameter checkpoints: ``manifest.json`` + ``params.bin`` in one directory.

The blob is the little-endian float64 concatenation of every array in
manifest order; the manifest records name, shape and byte offset per array
and the SHA-256 of the blob.  Directories are written under a temporary name
and renamed into place, so a checkpoint either exists completely or not at all.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(IOError):
    pass


def pack(arrays: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        if not np.all(np.isfinite(a)):
            raise CheckpointError(f"parameter {name!r} has non-finite entries")
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def save(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write a checkpoint directory atomically; returns the blob hash."""
    path = Path(path)
    if not path.parent.is_dir():
        raise CheckpointError(f"output directory {path.parent} does not exist")
    entries, blob = pack(arrays)
    digest = hashlib.sha256(blob).hexdigest()
    manifest = {"format": "jumpyplan-ckpt/1", "dtype": "<f8", "sha256": digest,
                "arrays": entries, "meta": meta or {}}
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / BLOB).write_bytes(blob)
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return digest


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"incomplete checkpoint at {path}: {e.filename} missing") from None
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError(f"checkpoint {path} failed its integrity check")
    arrays = {}
    for e in manifest["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return arrays, manifest["meta"]


def blob_hash(path: str | os.PathLike) -> str:
    return json.loads((Path(path) / MANIFEST).read_text())["sha256"]
