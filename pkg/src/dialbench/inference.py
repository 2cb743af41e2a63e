"""Whole-slide segmentation by non-overlapping sliding window.

Windows are laid out row-major on a stride-P grid starting at (0,0); the
last row/column may overhang the slide and is zero-padded (black after
normalization).  Each window's three magnification crops go through the
model in batches, the per-pixel argmax is stitched into one class raster,
and overhang is cropped away.  Because windows never overlap, stitched
output is bit-identical to segmenting any aligned sub-rectangle separately.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .classes import DEFAULT_PALETTE, N_CLASSES, UNLABELED
from .dmmn import DmmnModel, model_digest
from .patches import read_window
from .rle import decode_mask, encode_mask
from .wsi import LEVEL_FACTORS, WsiPyramid


@dataclass
class SegmentationMap:
    """Dense per-pixel class raster for one slide at full resolution."""

    slide_id: str
    model_hash: str
    data: np.ndarray
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.data.dtype != np.uint8 or self.data.ndim != 2:
            raise ValueError("segmentation data must be a 2-D uint8 array")
        if self.data.max(initial=0) >= N_CLASSES:
            raise ValueError("segmentation contains invalid class ids")
        if self.counts is None:
            self.counts = np.bincount(self.data.ravel(), minlength=N_CLASSES).astype(
                np.int64
            )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.data.shape, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.data).tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        # predictions reuse the mask container with the round field at -1
        Path(path).write_bytes(encode_mask(self.data, round_index=-1))

    @classmethod
    def load(cls, path: str | Path, slide_id: str, model_hash: str) -> "SegmentationMap":
        data, _ = decode_mask(Path(path).read_bytes())
        if (data == UNLABELED).any():
            raise ValueError("segmentation map may not contain unlabeled pixels")
        return cls(slide_id=slide_id, model_hash=model_hash, data=data)


def window_grid(width: int, height: int, stride: int) -> list[tuple[int, int]]:
    """Row-major top-left corners covering the full extent (ceil division)."""
    nx = math.ceil(width / stride)
    ny = math.ceil(height / stride)
    return [(ix * stride, iy * stride) for iy in range(ny) for ix in range(nx)]


def segment_slide(
    model: DmmnModel,
    slide: WsiPyramid,
    batch_size: int = 32,
    progress=None,
) -> SegmentationMap:
    p = model.config.patch_size
    h, w = slide.height, slide.width
    origins = window_grid(w, h, p)
    out = np.empty(
        (math.ceil(h / p) * p, math.ceil(w / p) * p), dtype=np.uint8
    )
    model.eval()
    with torch.no_grad():
        for start in range(0, len(origins), batch_size):
            chunk = origins[start : start + batch_size]
            stacks = ([], [], [])
            for x0, y0 in chunk:
                for dst, img in zip(stacks, read_window(slide, x0, y0, p)):
                    dst.append(img)
            # contiguous NCHW: oneDNN convolutions are bitwise sensitive to
            # input striding, and per-window reference checks feed contiguous
            # tensors, so materialize the layout instead of permuting a view
            tensors = [
                torch.from_numpy(
                    np.ascontiguousarray(np.stack(s).transpose(0, 3, 1, 2)).astype(
                        np.float32
                    )
                    / 255.0
                )
                for s in stacks
            ]
            pred = model(*tensors).argmax(dim=1).numpy().astype(np.uint8)
            for (x0, y0), tile in zip(chunk, pred):
                out[y0 : y0 + p, x0 : x0 + p] = tile
            if progress is not None:
                progress(min(start + batch_size, len(origins)), len(origins))
    return SegmentationMap(
        slide_id=slide.slide_id,
        model_hash=model_digest(model),
        data=np.ascontiguousarray(out[:h, :w]),
    )


def _blend(image: np.ndarray, colors: np.ndarray, alpha: float) -> np.ndarray:
    mixed = (1.0 - alpha) * image.astype(np.float64) + alpha * colors.astype(np.float64)
    return np.floor(mixed + 0.5).astype(np.uint8)


def overlay_segmentation(
    slide: WsiPyramid,
    seg: SegmentationMap | np.ndarray,
    alpha: float = 0.5,
    level: int = 0,
    palette: np.ndarray = DEFAULT_PALETTE,
) -> np.ndarray:
    """Alpha-blend class colors over the slide at the requested pyramid
    level.  The full-resolution class raster is reduced to coarser levels by
    stride slicing, keeping it aligned with the box-filtered imagery."""
    data = seg.data if isinstance(seg, SegmentationMap) else np.asarray(seg)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be within [0, 1]")
    if level not in range(len(LEVEL_FACTORS)):
        raise ValueError(f"level must be one of 0..{len(LEVEL_FACTORS) - 1}")
    img = slide.levels[level]
    f = LEVEL_FACTORS[level]
    cls = data[::f, ::f]
    if cls.shape != img.shape[:2]:
        raise ValueError("segmentation does not match slide dimensions")
    if cls.max(initial=0) >= N_CLASSES:
        raise ValueError("unknown class id in segmentation")
    return _blend(img, palette[cls], alpha)


def overlay_annotation(
    slide: WsiPyramid,
    mask_data: np.ndarray,
    alpha: float = 0.5,
    level: int = 0,
    palette: np.ndarray = DEFAULT_PALETTE,
) -> np.ndarray:
    """Like overlay_segmentation but for sparse annotation rasters:
    unlabeled pixels show the bare slide."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be within [0, 1]")
    img = slide.levels[level]
    f = LEVEL_FACTORS[level]
    cls = np.asarray(mask_data)[::f, ::f]
    if cls.shape != img.shape[:2]:
        raise ValueError("mask does not match slide dimensions")
    labeled = cls != UNLABELED
    if cls[labeled].max(initial=0) >= N_CLASSES:
        raise ValueError("unknown class id in annotation mask")
    out = img.copy()
    safe = np.where(labeled, cls, 0)
    out[labeled] = _blend(img, palette[safe], alpha)[labeled]
    return out
