"""Append-only patch record files with a class-to-offset index.

Store layout (little-endian):

    magic       9 bytes  b"DIALPATS1"
    header_len  u32
    header      JSON: {"patch_size": P, "record_size": bytes}
    records     fixed-size, back to back

Record layout: slide id (64 bytes, NUL padded), center x/y (i32), round
(i32), deformed (u8), 3 pad bytes, the three P*P RGB rasters raw, the
run-length-encoded target (u32 length prefix, zero padded to the worst-case
capacity). Fixed-size records let the sidecar index (``<store>.idx.json``)
address records by byte offset, keyed by the classes present in each target.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import rle
from .classes import UNLABELED
from .patches import PatchRecord

MAGIC = b"DIALPATS1"
_SLIDE_ID_BYTES = 64
_META = struct.Struct("<iiiB3x")


def _rle_capacity(p: int) -> int:
    # worst case: every row alternates values -> p runs of (u8, u32) + count
    return p * (4 + 5 * p)


def record_size(p: int) -> int:
    return _SLIDE_ID_BYTES + _META.size + 3 * (p * p * 3) + 4 + _rle_capacity(p)


def _encode_target(target: np.ndarray) -> bytes:
    parts = []
    for row in target:
        runs = rle.encode_row(row)
        parts.append(struct.pack("<I", len(runs)))
        parts.append(b"".join(struct.pack("<BI", v, n) for v, n in runs))
    return b"".join(parts)


def _decode_target(buf: bytes, p: int) -> np.ndarray:
    data = np.empty((p, p), dtype=np.uint8)
    off = 0
    for y in range(p):
        (n_runs,) = struct.unpack_from("<I", buf, off)
        off += 4
        runs = []
        for _ in range(n_runs):
            v, n = struct.unpack_from("<BI", buf, off)
            off += 5
            runs.append((v, n))
        data[y] = rle.decode_row(runs, p)
    return data


class PatchStoreWriter:
    def __init__(self, path: str | Path, patch_size: int):
        self.path = Path(path)
        self.patch_size = patch_size
        self.record_size = record_size(patch_size)
        self._index: dict[int, list[int]] = {}
        self._n = 0
        header = json.dumps(
            {"patch_size": patch_size, "record_size": self.record_size}
        ).encode()
        self._fh = open(self.path, "wb")
        self._fh.write(MAGIC + struct.pack("<I", len(header)) + header)
        self._base = self._fh.tell()

    def append(self, patch: PatchRecord) -> None:
        p = self.patch_size
        if patch.patch_size != p:
            raise ValueError("patch size does not match store")
        sid = patch.slide_id.encode()
        if len(sid) > _SLIDE_ID_BYTES:
            raise ValueError("slide id longer than 64 bytes")
        offset = self._base + self._n * self.record_size
        buf = bytearray(self.record_size)
        buf[: len(sid)] = sid
        pos = _SLIDE_ID_BYTES
        _META.pack_into(
            buf, pos, patch.center[0], patch.center[1], patch.round, int(patch.deformed)
        )
        pos += _META.size
        for img in (patch.img20, patch.img10, patch.img5):
            raw = np.ascontiguousarray(img, dtype=np.uint8).tobytes()
            buf[pos : pos + len(raw)] = raw
            pos += len(raw)
        enc = _encode_target(patch.target)
        struct.pack_into("<I", buf, pos, len(enc))
        pos += 4
        buf[pos : pos + len(enc)] = enc
        self._fh.write(bytes(buf))
        for c in np.unique(patch.target):
            if c != UNLABELED:
                self._index.setdefault(int(c), []).append(offset)
        self._n += 1

    def close(self) -> None:
        self._fh.close()
        index_path = self.path.with_suffix(self.path.suffix + ".idx.json")
        index_path.write_text(
            json.dumps({"n_records": self._n, "class_offsets": self._index})
        )

    def __enter__(self) -> "PatchStoreWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_patches(path: str | Path, patches: list[PatchRecord], patch_size: int) -> None:
    with PatchStoreWriter(path, patch_size) as store:
        for p in patches:
            store.append(p)


def _parse_record(buf: bytes, p: int) -> PatchRecord:
    sid = buf[:_SLIDE_ID_BYTES].rstrip(b"\0").decode()
    cx, cy, rnd, deformed = _META.unpack_from(buf, _SLIDE_ID_BYTES)
    pos = _SLIDE_ID_BYTES + _META.size
    imgs = []
    n = p * p * 3
    for _ in range(3):
        imgs.append(
            np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).reshape(p, p, 3).copy()
        )
        pos += n
    (enc_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    target = _decode_target(buf[pos : pos + enc_len], p)
    return PatchRecord(
        slide_id=sid,
        center=(cx, cy),
        img20=imgs[0],
        img10=imgs[1],
        img5=imgs[2],
        target=target,
        round=rnd,
        deformed=bool(deformed),
    )


def read_patches(path: str | Path) -> list[PatchRecord]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError("bad patch store magic")
    (header_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    header = json.loads(raw[len(MAGIC) + 4 : len(MAGIC) + 4 + header_len])
    p, rs = header["patch_size"], header["record_size"]
    base = len(MAGIC) + 4 + header_len
    out = []
    for off in range(base, len(raw), rs):
        out.append(_parse_record(raw[off : off + rs], p))
    return out


def read_index(path: str | Path) -> dict[int, list[int]]:
    index_path = Path(path).with_suffix(Path(path).suffix + ".idx.json")
    payload = json.loads(index_path.read_text())
    return {int(k): v for k, v in payload["class_offsets"].items()}
