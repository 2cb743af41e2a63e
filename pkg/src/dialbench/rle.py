"""Run-length codec and the on-disk mask file format.

Mask files are little-endian binary:

    magic     9 bytes   b"DIALMASK1"
    width     u32
    height    u32
    round     i32       (-1 marks model predictions)
    rows      height times:
        n_runs  u32
        runs    n_runs x (class u8, length u32)

Runs within a row are maximal (adjacent runs never share a value) and their
lengths sum exactly to ``width``, so a given raster has exactly one encoding.
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .classes import MaskFormatError, N_CLASSES, UNLABELED, validate_mask_values

MAGIC = b"DIALMASK1"
_HEADER = struct.Struct("<IIi")


def encode_row(row: np.ndarray) -> list[tuple[int, int]]:
    """Encode one mask row into canonical (value, run_length) pairs."""
    if row.size == 0:
        return []
    change = np.flatnonzero(row[1:] != row[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [row.size]))
    return [(int(row[s]), int(e - s)) for s, e in zip(starts, ends)]


def decode_row(runs: list[tuple[int, int]], width: int) -> np.ndarray:
    values = np.array([v for v, _ in runs], dtype=np.uint8)
    lengths = np.array([n for _, n in runs], dtype=np.int64)
    if lengths.sum() != width:
        raise MaskFormatError(
            f"row runs sum to {int(lengths.sum())}, expected width {width}"
        )
    return np.repeat(values, lengths)


def encode_mask(data: np.ndarray, round_index: int) -> bytes:
    """Serialize a full mask raster to the file format above."""
    if data.ndim != 2 or data.dtype != np.uint8:
        raise MaskFormatError("mask raster must be a 2-D uint8 array")
    validate_mask_values(data)
    height, width = data.shape
    parts = [MAGIC, _HEADER.pack(width, height, round_index)]
    for row in data:
        runs = encode_row(row)
        parts.append(struct.pack("<I", len(runs)))
        parts.append(b"".join(struct.pack("<BI", v, n) for v, n in runs))
    return b"".join(parts)


def decode_mask(buf: bytes) -> tuple[np.ndarray, int]:
    """Parse mask file bytes, returning (raster, round_index)."""
    if buf[: len(MAGIC)] != MAGIC:
        raise MaskFormatError("bad mask magic")
    off = len(MAGIC)
    try:
        width, height, round_index = _HEADER.unpack_from(buf, off)
        off += _HEADER.size
        data = np.empty((height, width), dtype=np.uint8)
        for y in range(height):
            (n_runs,) = struct.unpack_from("<I", buf, off)
            off += 4
            runs = []
            for _ in range(n_runs):
                v, n = struct.unpack_from("<BI", buf, off)
                off += 5
                if v >= N_CLASSES and v != UNLABELED:
                    raise MaskFormatError(
                        f"mask file contains invalid class value {v}"
                    )
                runs.append((v, n))
            data[y] = decode_row(runs, width)
    except struct.error as exc:
        raise MaskFormatError(f"truncated mask file: {exc}") from exc
    if off != len(buf):
        raise MaskFormatError("trailing bytes after mask rows")
    return data, round_index


def save_mask(path, data: np.ndarray, round_index: int) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_mask(data, round_index))


def load_mask(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        return decode_mask(fh.read())


def write_mask(fh: BinaryIO, data: np.ndarray, round_index: int) -> None:
    fh.write(encode_mask(data, round_index))
