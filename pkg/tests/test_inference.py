"""Sliding-window inference oracles: grid layout, stitching equivalence,
segmentation-map persistence, and overlay blending arithmetic."""
import math

import numpy as np
import pytest
import torch

from dialbench.classes import DEFAULT_PALETTE, UNLABELED
from dialbench.dmmn import DmmnConfig, DmmnModel
from dialbench.inference import (
    SegmentationMap,
    overlay_annotation,
    overlay_segmentation,
    segment_slide,
    window_grid,
)
from dialbench.patches import read_window
from dialbench.rle import encode_mask
from dialbench.wsi import WsiPyramid

TINY = DmmnConfig(patch_size=32, base_channels=2, depth=2, rng_seed=3)


def fake_slide(h, w, seed=0, slide_id="fake"):
    rng = np.random.default_rng(seed)
    levels = tuple(
        rng.integers(0, 256, (-(-h // f), -(-w // f), 3), dtype=np.uint8)
        for f in (1, 2, 4)
    )
    return WsiPyramid(slide_id=slide_id, case_id="c", levels=levels)


# --- window grid -------------------------------------------------------------


def test_window_grid_small_explicit():
    assert window_grid(5, 3, 2) == [(0, 0), (2, 0), (4, 0), (0, 2), (2, 2), (4, 2)]


def test_window_grid_exact_fit():
    grid = window_grid(512, 256, 256)
    assert grid == [(0, 0), (256, 0)]


def test_window_grid_overhang_count():
    # 4100 = 16 * 256 + 4: the 4-pixel tail still needs its own column.
    grid = window_grid(4100, 256, 256)
    assert len(grid) == 17
    assert grid[-1] == (4096, 0)


def test_window_grid_is_row_major_cover():
    stride = 32
    w, h = 100, 70
    grid = window_grid(w, h, stride)
    assert len(grid) == math.ceil(w / stride) * math.ceil(h / stride)
    assert grid == sorted(grid, key=lambda xy: (xy[1], xy[0]))
    covered = np.zeros((h, w), bool)
    for x0, y0 in grid:
        covered[y0 : y0 + stride, x0 : x0 + stride] = True
    assert covered.all()


# --- stitching ---------------------------------------------------------------


def manual_segment(model, slide):
    """Reference implementation: one window at a time, crop at the end."""
    p = model.config.patch_size
    h, w = slide.height, slide.width
    out = np.zeros((math.ceil(h / p) * p, math.ceil(w / p) * p), np.uint8)
    model.eval()
    with torch.no_grad():
        for x0, y0 in window_grid(w, h, p):
            imgs = read_window(slide, x0, y0, p)
            ts = [
                torch.from_numpy(i.astype(np.float32) / 255.0)
                .permute(2, 0, 1)
                .unsqueeze(0)
                for i in imgs
            ]
            out[y0 : y0 + p, x0 : x0 + p] = (
                model(*ts).argmax(dim=1)[0].numpy().astype(np.uint8)
            )
    return out[:h, :w]


def test_stitching_matches_per_window_reference():
    model = DmmnModel(TINY)
    slide = fake_slide(80, 96, seed=1)  # 80 is not a multiple of 32: overhang row
    seg = segment_slide(model, slide, batch_size=5)
    assert seg.data.shape == (80, 96)
    assert np.array_equal(seg.data, manual_segment(model, slide))


def test_stitching_batch_size_invariant():
    model = DmmnModel(TINY)
    slide = fake_slide(64, 64, seed=2)
    a = segment_slide(model, slide, batch_size=1)
    b = segment_slide(model, slide, batch_size=64)
    assert a.digest() == b.digest()


def test_segment_slide_metadata_and_progress():
    model = DmmnModel(TINY)
    slide = fake_slide(64, 96, seed=3, slide_id="s-77")
    ticks = []
    seg = segment_slide(model, slide, batch_size=4, progress=lambda d, t: ticks.append((d, t)))
    assert seg.slide_id == "s-77"
    assert len(seg.model_hash) == 64
    assert ticks[-1] == (6, 6)  # 3x2 windows
    assert np.array_equal(seg.counts, np.bincount(seg.data.ravel(), minlength=7))


# --- SegmentationMap ---------------------------------------------------------


def test_map_validation():
    with pytest.raises(ValueError):
        SegmentationMap("s", "h", np.zeros((4, 4), np.int32))
    with pytest.raises(ValueError):
        SegmentationMap("s", "h", np.zeros((4, 4, 3), np.uint8))
    with pytest.raises(ValueError):
        SegmentationMap("s", "h", np.full((4, 4), 7, np.uint8))


def test_map_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    data = rng.integers(0, 7, size=(33, 57)).astype(np.uint8)
    seg = SegmentationMap("s1", "hash", data)
    seg.save(tmp_path / "s1.seg")
    back = SegmentationMap.load(tmp_path / "s1.seg", "s1", "hash")
    assert np.array_equal(back.data, data)
    assert back.digest() == seg.digest()
    assert np.array_equal(back.counts, seg.counts)


def test_map_load_rejects_unlabeled_pixels(tmp_path):
    data = np.zeros((8, 8), np.uint8)
    data[0, 0] = UNLABELED
    (tmp_path / "bad.seg").write_bytes(encode_mask(data, round_index=-1))
    with pytest.raises(ValueError, match="unlabeled"):
        SegmentationMap.load(tmp_path / "bad.seg", "s", "h")


def test_digest_tracks_content():
    a = SegmentationMap("s", "h", np.zeros((8, 8), np.uint8))
    b = SegmentationMap("other", "hashes differ", np.zeros((8, 8), np.uint8))
    assert a.digest() == b.digest()  # identity is the raster, not the metadata
    c = SegmentationMap("s", "h", np.ones((8, 8), np.uint8))
    assert a.digest() != c.digest()
    # Same bytes, different geometry: digests must differ.
    d = SegmentationMap("s", "h", np.zeros((4, 16), np.uint8))
    assert a.digest() != d.digest()


# --- overlays ----------------------------------------------------------------


def test_overlay_alpha_extremes():
    slide = fake_slide(32, 32, seed=5)
    seg = np.full((32, 32), 3, np.uint8)
    assert np.array_equal(overlay_segmentation(slide, seg, alpha=0.0), slide.levels[0])
    pure = overlay_segmentation(slide, seg, alpha=1.0)
    assert np.array_equal(pure, np.broadcast_to(DEFAULT_PALETTE[3], (32, 32, 3)))


def test_overlay_blend_rounds_half_up():
    slide = fake_slide(32, 32, seed=6)
    img = slide.levels[0]
    seg = np.zeros((32, 32), np.uint8)
    got = overlay_segmentation(slide, seg, alpha=0.5)
    mixed = 0.5 * img.astype(np.float64) + 0.5 * DEFAULT_PALETTE[0].astype(np.float64)
    assert np.array_equal(got, np.floor(mixed + 0.5).astype(np.uint8))
    # A concrete half case: 100 blended with 101 at 0.5 is 100.5 -> 101.
    assert np.floor(np.float64(100.5) + 0.5) == 101.0


def test_overlay_level_uses_stride_slicing():
    slide = fake_slide(32, 32, seed=7)
    seg = np.zeros((32, 32), np.uint8)
    seg[::2, ::2] = 5  # even positions are what level 1 should see
    got = overlay_segmentation(slide, seg, alpha=1.0, level=1)
    assert got.shape == slide.levels[1].shape
    assert np.array_equal(got, np.broadcast_to(DEFAULT_PALETTE[5], got.shape))


def test_overlay_rejections():
    slide = fake_slide(32, 32, seed=8)
    seg = np.zeros((32, 32), np.uint8)
    with pytest.raises(ValueError):
        overlay_segmentation(slide, seg, alpha=1.5)
    with pytest.raises(ValueError):
        overlay_segmentation(slide, seg, level=3)
    with pytest.raises(ValueError):
        overlay_segmentation(slide, np.zeros((16, 16), np.uint8))
    with pytest.raises(ValueError):
        overlay_segmentation(slide, np.full((32, 32), 9, np.uint8))


def test_annotation_overlay_blends_only_labeled():
    slide = fake_slide(32, 32, seed=9)
    mask = np.full((32, 32), UNLABELED, np.uint8)
    mask[4, 4] = 2
    out = overlay_annotation(slide, mask, alpha=1.0)
    untouched = np.ones((32, 32), bool)
    untouched[4, 4] = False
    assert np.array_equal(out[untouched], slide.levels[0][untouched])
    assert np.array_equal(out[4, 4], DEFAULT_PALETTE[2])


def test_annotation_overlay_rejects_bad_class():
    slide = fake_slide(32, 32, seed=10)
    mask = np.full((32, 32), UNLABELED, np.uint8)
    mask[0, 0] = 8
    with pytest.raises(ValueError, match="unknown class"):
        overlay_annotation(slide, mask)
