"""Binary checkpoint files: JSON manifest plus raw float32 little-endian blobs.

Layout: magic 'PBFM' | u32 version | u64 manifest length | manifest JSON |
concatenated tensor blobs in manifest order. The manifest stores a sha256 of
the blob section, so load detects any bit flip.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Parameter
from .errors import CheckpointError

MAGIC = b"PBFM"
VERSION = 1


def params_blob(params: list[Parameter]) -> bytes:
    """Concatenated little-endian float32 bytes of all parameter values."""
    return b"".join(np.ascontiguousarray(p.value, dtype="<f4").tobytes() for p in params)


def params_digest(params: list[Parameter]) -> str:
    return hashlib.sha256(params_blob(params)).hexdigest()


@dataclass
class Checkpoint:
    kind: str
    config: dict
    metadata: dict
    tensors: dict[str, np.ndarray]

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config,
            "metadata": self.metadata,
            "tensors": [{"name": n, "shape": list(t.shape)} for n, t in self.tensors.items()],
        }


def save_checkpoint(path, kind: str, config: dict, params: list[Parameter],
                    metadata: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = params_blob(params)
    manifest = {
        "kind": kind,
        "config": config,
        "metadata": metadata or {},
        "tensors": [{"name": p.name, "shape": list(p.value.shape)} for p in params],
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(mbytes)))
        fh.write(mbytes)
        fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    version, mlen = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header_end = 4 + 12
    manifest = json.loads(raw[header_end:header_end + mlen].decode())
    blob = raw[header_end + mlen:]
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise CheckpointError(f"checkpoint {path} failed integrity check (blob hash mismatch)")
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if offset + nbytes > len(blob):
            raise CheckpointError(f"checkpoint {path} blob shorter than manifest declares")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        tensors[entry["name"]] = arr
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"checkpoint {path} has {len(blob) - offset} trailing blob bytes")
    return Checkpoint(kind=manifest["kind"], config=manifest["config"],
                      metadata=manifest["metadata"], tensors=tensors)


def load_params_into(ck: Checkpoint, params: list[Parameter]) -> None:
    """Copy checkpoint tensors into existing parameters, by name, shape-checked."""
    for p in params:
        if p.name not in ck.tensors:
            raise CheckpointError(f"checkpoint missing tensor {p.name!r}")
        t = ck.tensors[p.name]
        if tuple(t.shape) != tuple(p.value.shape):
            raise CheckpointError(
                f"shape mismatch for {p.name!r}: checkpoint {t.shape} vs model {p.value.shape}"
            )
        p.value[...] = t.astype(p.value.dtype)
