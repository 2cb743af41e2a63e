"""Slide pyramids, partial annotations, and their on-disk layout.

A slide is held at three registered magnifications. Level 0 is the full-
resolution raster; levels 1 and 2 are 2x2 and 4x4 box-filter means of it
(round half up), so they are reproducible bit-exactly from level 0.

On disk a slide is a directory with a JSON manifest and 256x256 PNG tiles
per level named ``L{level}_{row}_{col}.png`` (row-major).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import rle
from .classes import UNLABELED, N_CLASSES, validate_mask_values

TILE_SIZE = 256
LEVEL_FACTORS = (1, 2, 4)  # downsampling of levels 0, 1, 2
MIN_SLIDE_DIM = 1024


def round_half_up(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (inputs here are >= 0)."""
    return np.floor(x + 0.5)


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Mean over factor x factor blocks, round half up, uint8 output.

    Edge blocks of non-divisible rasters average only the covered pixels.
    """
    if factor == 1:
        return img
    h, w = img.shape[:2]
    row_idx = np.arange(0, h, factor)
    col_idx = np.arange(0, w, factor)
    acc = np.add.reduceat(img.astype(np.float64), row_idx, axis=0)
    acc = np.add.reduceat(acc, col_idx, axis=1)
    row_n = np.minimum(row_idx + factor, h) - row_idx
    col_n = np.minimum(col_idx + factor, w) - col_idx
    denom = np.outer(row_n, col_n)
    if img.ndim == 3:
        denom = denom[:, :, None]
    return round_half_up(acc / denom).astype(np.uint8)


@dataclass(frozen=True)
class WsiPyramid:
    """A slide held at full, half, and quarter resolution."""

    slide_id: str
    case_id: str
    levels: tuple[np.ndarray, np.ndarray, np.ndarray]

    @property
    def width(self) -> int:
        return self.levels[0].shape[1]

    @property
    def height(self) -> int:
        return self.levels[0].shape[0]

    def level_dims(self, level: int) -> tuple[int, int]:
        h, w = self.levels[level].shape[:2]
        return w, h


def build_pyramid(level0: np.ndarray, slide_id: str, case_id: str = "") -> WsiPyramid:
    """Construct the three-level pyramid from a full-resolution RGB raster."""
    if level0.ndim != 3 or level0.shape[2] != 3 or level0.dtype != np.uint8:
        raise ValueError("level-0 raster must be HxWx3 uint8")
    h, w = level0.shape[:2]
    if h < MIN_SLIDE_DIM or w < MIN_SLIDE_DIM:
        raise ValueError(
            f"slide dimensions {w}x{h} below minimum {MIN_SLIDE_DIM}"
        )
    levels = (level0, box_downsample(level0, 2), box_downsample(level0, 4))
    for k, lvl in enumerate(levels):
        f = LEVEL_FACTORS[k]
        expect = (-(-h // f), -(-w // f))
        if lvl.shape[:2] != expect:
            raise AssertionError("pyramid level dimensions violate halving")
    return WsiPyramid(slide_id=slide_id, case_id=case_id, levels=levels)


def save_slide(slide: WsiPyramid, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "slide_id": slide.slide_id,
        "case_id": slide.case_id,
        "width_20x": slide.width,
        "height_20x": slide.height,
        "tile_size": TILE_SIZE,
        "levels": len(slide.levels),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    for k, lvl in enumerate(slide.levels):
        h, w = lvl.shape[:2]
        for row in range(0, h, TILE_SIZE):
            for col in range(0, w, TILE_SIZE):
                tile = lvl[row : row + TILE_SIZE, col : col + TILE_SIZE]
                name = f"L{k}_{row // TILE_SIZE}_{col // TILE_SIZE}.png"
                Image.fromarray(tile).save(directory / name)


def load_slide(directory: str | Path) -> WsiPyramid:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    w, h = manifest["width_20x"], manifest["height_20x"]
    levels = []
    for k, f in enumerate(LEVEL_FACTORS):
        lh, lw = -(-h // f), -(-w // f)
        lvl = np.empty((lh, lw, 3), dtype=np.uint8)
        for row in range(0, lh, TILE_SIZE):
            for col in range(0, lw, TILE_SIZE):
                name = f"L{k}_{row // TILE_SIZE}_{col // TILE_SIZE}.png"
                tile = np.asarray(Image.open(directory / name).convert("RGB"))
                lvl[row : row + TILE_SIZE, col : col + TILE_SIZE] = tile
        levels.append(lvl)
    return WsiPyramid(
        slide_id=manifest["slide_id"],
        case_id=manifest["case_id"],
        levels=tuple(levels),
    )


@dataclass
class LabelMask:
    """Partial per-pixel annotation at full resolution.

    ``round`` 0 is the initial annotation, k the k-th correction, and -1 a
    model prediction persisted in the same format. The raster is dense in
    memory; files use the run-length format in :mod:`dialbench.rle`.
    """

    slide_id: str
    round: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.data.ndim != 2 or self.data.dtype != np.uint8:
            raise ValueError("mask raster must be 2-D uint8")
        validate_mask_values(self.data)

    @property
    def labeled_count(self) -> int:
        return int((self.data != UNLABELED).sum())

    def save(self, path: str | Path) -> None:
        rle.save_mask(path, self.data, self.round)

    @classmethod
    def load(cls, path: str | Path, slide_id: str) -> "LabelMask":
        data, round_index = rle.load_mask(path)
        return cls(slide_id=slide_id, round=round_index, data=data)

    @classmethod
    def empty(cls, slide_id: str, shape: tuple[int, int], round_index: int) -> "LabelMask":
        return cls(
            slide_id=slide_id,
            round=round_index,
            data=np.full(shape, UNLABELED, dtype=np.uint8),
        )


def merge_masks(masks: list[LabelMask]) -> LabelMask:
    """Overlay masks so the highest-round label wins at each pixel.

    Input order is ignored; masks are sorted by round before merging.
    """
    if not masks:
        raise ValueError("need at least one mask to merge")
    slide_id = masks[0].slide_id
    shape = masks[0].data.shape
    for m in masks:
        if m.slide_id != slide_id:
            raise ValueError("cannot merge masks of different slides")
        if m.data.shape != shape:
            raise ValueError("mask dimension mismatch")
    out = np.full(shape, UNLABELED, dtype=np.uint8)
    top_round = 0
    for m in sorted(masks, key=lambda m: m.round):
        labeled = m.data != UNLABELED
        out[labeled] = m.data[labeled]
        top_round = max(top_round, m.round)
    return LabelMask(slide_id=slide_id, round=top_round, data=out)


def class_pixel_counts(masks) -> np.ndarray:
    """Per-class labeled-pixel totals over masks or raw rasters (length 7)."""
    counts = np.zeros(N_CLASSES, dtype=np.int64)
    for m in masks:
        data = m.data if isinstance(m, LabelMask) else m
        counts += np.bincount(
            data[data != UNLABELED].ravel(), minlength=N_CLASSES
        )[:N_CLASSES]
    return counts
