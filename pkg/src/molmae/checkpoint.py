"""Checkpoints: a JSON manifest next to one raw little-endian array blob."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import tensor as T

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "arrays.bin"


class CheckpointError(ValueError):
    pass


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(directory: str | Path, params: dict[str, T.Tensor], config: dict,
         extra: dict | None = None) -> Path:
    """Write ``params`` under ``directory``; the blob is renamed into place first,
    then the manifest, so a reader never sees a manifest without its blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = []
    chunks = []
    offset = 0
    for name, p in params.items():
        arr = np.ascontiguousarray(p.data)
        if arr.dtype not in (np.float32, np.float64):
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        table.append({
            "name": name,
            "shape": list(arr.shape),
            "bits": arr.dtype.itemsize * 8,
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "arrays": table,
        "blob": BLOB,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        **({"extra": extra} if extra else {}),
    }
    _atomic_write(directory / BLOB, blob)
    _atomic_write(directory / MANIFEST, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return directory


def load(directory: str | Path) -> tuple[OrderedDict[str, T.Tensor], dict]:
    """Read a checkpoint, verifying every checksum. Returns (params, manifest)."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
        blob = (directory / manifest.get("blob", BLOB)).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint at {directory}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError("array blob checksum mismatch")
    params: OrderedDict[str, T.Tensor] = OrderedDict()
    for entry in manifest["arrays"]:
        name = entry["name"]
        if name in params:
            raise CheckpointError(f"duplicate array name {name}")
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"checksum mismatch for {name}")
        dtype = np.dtype("<f4" if entry["bits"] == 32 else "<f8")
        arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
        params[name] = T.Tensor(arr.astype(dtype.newbyteorder("="), copy=True), requires_grad=True,
                                name=name)
    return params, manifest
