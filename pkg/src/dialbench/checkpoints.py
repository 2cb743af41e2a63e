"""Self-describing checkpoint files with parent-hash lineage.

Layout: magic ``DIALCKPT1``, u32 header length, JSON header, then every
state-dict tensor as raw little-endian float32 in state-dict order.  The
header records the model configuration, tensor names/shapes, the SHA-256 of
the parent checkpoint file (null for a freshly initialized model) and free
-form metadata (round number, training settings, validation score).  A
checkpoint's identity is the SHA-256 of its file bytes, so lineage can be
verified offline by re-hashing files and chasing ``parent_hash``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .dmmn import DmmnConfig, DmmnModel

MAGIC = b"DIALCKPT1"


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(
    path: str | Path,
    model: DmmnModel,
    parent_hash: str | None = None,
    meta: dict[str, Any] | None = None,
) -> str:
    """Write the model to ``path`` and return the file's SHA-256."""
    state = model.state_dict()
    header = {
        "config": asdict(model.config),
        "parent_hash": parent_hash,
        "meta": meta or {},
        "tensors": [
            {"name": name, "shape": list(t.shape)} for name, t in state.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in state.values():
            fh.write(t.detach().cpu().numpy().astype("<f4").tobytes())
    return file_sha256(path)


def read_header(path: str | Path) -> dict[str, Any]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(hlen))


def load_checkpoint(path: str | Path) -> tuple[DmmnModel, dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    off = len(MAGIC) + 4
    header = json.loads(raw[off : off + hlen])
    off += hlen
    model = DmmnModel(DmmnConfig(**header["config"]))
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.copy())
        off += 4 * n
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after tensor data")
    model.load_state_dict(state)
    return model, header


def verify_lineage(paths: list[str | Path]) -> None:
    """Check that each checkpoint's recorded parent hash matches the actual
    hash of its predecessor file; raises ValueError on any break."""
    prev_hash: str | None = None
    for i, path in enumerate(paths):
        header = read_header(path)
        recorded = header.get("parent_hash")
        if i == 0:
            prev_hash = file_sha256(path)
            continue
        if recorded != prev_hash:
            raise ValueError(
                f"lineage break at {path}: recorded parent {recorded!r}, "
                f"actual predecessor hash {prev_hash!r}"
            )
        prev_hash = file_sha256(path)
