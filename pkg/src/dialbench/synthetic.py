"""Procedural slide corpus with known ground truth.

Each slide's class layout is the argmax of per-class smooth random score
fields (coarse Gaussian grids upsampled bicubically). A shared bias shift
between viable-tumor and necrotic scores is binary-searched so the case-wide
necrosis ratio lands on the requested target. Per-class procedural textures
(base color + coarse shading + fine grain) keep most classes separable by
color while the necrotic classes deliberately mimic their lookalikes (see
``DEFAULT_TEXTURES``), so segmentation quality depends on how much labeled
evidence of those classes the model has seen. Generation is fully
deterministic in the case seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.ndimage import zoom

from .classes import NECROTIC_CLASSES, TissueClass, UNLABELED
from .wsi import LabelMask, MIN_SLIDE_DIM, WsiPyramid, build_pyramid


@dataclass(frozen=True)
class ClassTexture:
    """Appearance and layout descriptor for one class."""

    base_color: tuple[int, int, int]
    noise_amplitude: float = 14.0
    blob_scale: float = 1.0  # >1 gives larger, fewer regions
    shade_scale: float = 1.0  # >1 gives coarser within-region shading


# Shading and grain are added equally to all three channels (a luminance
# wobble), so chroma differences between classes are noise-free.  The two
# necrotic classes share their lookalike's chroma exactly --
# necrosis-without-bone sits a luminance step above viable tumor, and
# necrosis-with-bone a step below normal bone -- and differ further in
# shading coarseness.  The step (28) is about three effective noise sigmas
# (amplitude 8 of smooth shading plus fine grain), so pixels still overlap
# in the tails and region shading can mask the offset locally, but a model
# that has seen labeled examples of both sides can resolve the pair.  A
# model trained with hardly any necrotic labels instead maps those regions
# onto the lookalike; that gap is what corrections fix.
DEFAULT_TEXTURES: dict[TissueClass, ClassTexture] = {
    TissueClass.VIABLE_TUMOR: ClassTexture((200, 60, 110), noise_amplitude=8.0),
    TissueClass.NECROSIS_WITH_BONE: ClassTexture(
        (207, 177, 122), noise_amplitude=8.0, shade_scale=2.5
    ),
    TissueClass.NECROSIS_WITHOUT_BONE: ClassTexture(
        (228, 88, 138), noise_amplitude=8.0, shade_scale=3.0
    ),
    TissueClass.NORMAL_BONE: ClassTexture((235, 205, 150), noise_amplitude=8.0),
    TissueClass.NORMAL_TISSUE: ClassTexture((120, 200, 170)),
    TissueClass.CARTILAGE: ClassTexture((170, 130, 220)),
    TissueClass.BLANK: ClassTexture((243, 243, 243), noise_amplitude=4.0),
}

_FIELD_CELLS = 6  # coarse grid resolution of the class score fields
_BUMP_AMPLITUDE = 8.0  # localized boost guaranteeing each class shows up
_RATIO_TOLERANCE = 0.05


@dataclass(frozen=True)
class SyntheticCaseSpec:
    """Deterministic recipe for one case of slides."""

    case_id: str
    n_slides: int = 1
    target_necrosis_ratio: float = 0.5
    rng_seed: int = 0
    slide_size: tuple[int, int] = (4096, 4096)
    texture_params: Mapping[TissueClass, ClassTexture] = field(
        default_factory=lambda: dict(DEFAULT_TEXTURES)
    )

    def validate(self) -> None:
        if self.n_slides < 1:
            raise ValueError("n_slides must be >= 1")
        if not 0.0 <= self.target_necrosis_ratio <= 1.0:
            raise ValueError("target_necrosis_ratio must lie in [0, 1]")
        w, h = self.slide_size
        if w < MIN_SLIDE_DIM or h < MIN_SLIDE_DIM:
            raise ValueError(f"slide_size must be at least {MIN_SLIDE_DIM}")
        if not self.texture_params:
            raise ValueError("texture_params must enable at least one class")


def _smooth_field(rng: np.random.Generator, shape: tuple[int, int], cells: int) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(cells, cells))
    h, w = shape
    out = zoom(coarse, (h / cells, w / cells), order=3, mode="reflect", grid_mode=True)
    return out.astype(np.float32)


def _presence_bump(shape: tuple[int, int], k: int) -> np.ndarray:
    """A fixed localized boost so class k wins somewhere regardless of bias."""
    h, w = shape
    cy = int(h * (0.15 + 0.7 * ((k * 3) % 7) / 6.0))
    cx = int(w * (0.15 + 0.7 * ((k * 5) % 7) / 6.0))
    sigma = max(h, w) / 28.0
    yy = np.arange(h, dtype=np.float32) - cy
    xx = np.arange(w, dtype=np.float32) - cx
    return _BUMP_AMPLITUDE * np.exp(
        -(yy[:, None] ** 2 + xx[None, :] ** 2) / (2.0 * sigma**2)
    )


def _class_maps_for_bias(
    fields: list[np.ndarray], directions: np.ndarray, delta: float, stride: int = 1
) -> list[np.ndarray]:
    maps = []
    for stack in fields:
        view = stack[:, ::stride, ::stride] if stride > 1 else stack
        adjusted = view + (directions * delta)[:, None, None]
        maps.append(np.argmax(adjusted, axis=0))
    return maps


def _ratio_for_maps(maps: list[np.ndarray], class_ids: list[int]) -> float:
    vt = 0
    nt = 0
    nt_ids = {int(c) for c in NECROTIC_CLASSES}
    for m in maps:
        hist = np.bincount(m.ravel(), minlength=len(class_ids))
        for idx, cid in enumerate(class_ids):
            if cid == TissueClass.VIABLE_TUMOR:
                vt += int(hist[idx])
            elif cid in nt_ids:
                nt += int(hist[idx])
    if vt + nt == 0:
        return float("nan")
    return nt / (vt + nt)


def _render_texture(
    rng: np.random.Generator,
    class_map: np.ndarray,
    class_ids: list[int],
    textures: Mapping[TissueClass, ClassTexture],
) -> np.ndarray:
    h, w = class_map.shape
    out = np.empty((h, w, 3), dtype=np.uint8)
    grain = rng.normal(0.0, 1.0, size=(h, w)).astype(np.float32)
    for idx, cid in enumerate(class_ids):
        tex = textures[TissueClass(cid)]
        region = class_map == idx
        shade_cells = max(2, int(24 / tex.shade_scale))
        shade = zoom(
            rng.normal(0.0, 1.0, size=(shade_cells, shade_cells)),
            (h / shade_cells, w / shade_cells),
            order=1,
            mode="reflect",
            grid_mode=True,
        ).astype(np.float32)
        for ch in range(3):
            vals = (
                tex.base_color[ch]
                + tex.noise_amplitude * shade[region]
                + 0.6 * tex.noise_amplitude * grain[region]
            )
            out[:, :, ch][region] = np.clip(np.rint(vals), 0, 255).astype(np.uint8)
    return out


def generate_synthetic_case(
    spec: SyntheticCaseSpec,
) -> tuple[list[WsiPyramid], list[LabelMask], float]:
    """Generate slides, fully-labeled ground truth, and the achieved ratio.

    Raises ``ValueError`` when the requested ratio cannot be met by the
    enabled classes (e.g. a spec with no tumor classes at all).
    """
    spec.validate()
    class_ids = sorted(int(c) for c in spec.texture_params)
    has_vt = int(TissueClass.VIABLE_TUMOR) in class_ids
    nt_ids = {int(c) for c in NECROTIC_CLASSES}
    has_nt = any(c in nt_ids for c in class_ids)
    if not has_vt and not has_nt:
        raise ValueError("unreachable ratio: spec enables no tumor classes")
    if spec.target_necrosis_ratio > _RATIO_TOLERANCE and not has_nt:
        raise ValueError("unreachable ratio: no necrotic classes enabled")
    if spec.target_necrosis_ratio < 1.0 - _RATIO_TOLERANCE and not has_vt and has_nt:
        raise ValueError("unreachable ratio: no viable tumor class enabled")

    rng = np.random.default_rng(spec.rng_seed)
    w, h = spec.slide_size
    shape = (h, w)
    directions = np.array(
        [
            1.0 if cid in nt_ids else (-1.0 if cid == TissueClass.VIABLE_TUMOR else 0.0)
            for cid in class_ids
        ],
        dtype=np.float32,
    )

    fields: list[np.ndarray] = []
    for slide_idx in range(spec.n_slides):
        stack = np.empty((len(class_ids), h, w), dtype=np.float32)
        for idx, cid in enumerate(class_ids):
            tex = spec.texture_params[TissueClass(cid)]
            cells = max(2, int(round(_FIELD_CELLS / tex.blob_scale)))
            stack[idx] = _smooth_field(rng, shape, cells)
            if slide_idx == cid % spec.n_slides:
                stack[idx] += _presence_bump(shape, cid)
        fields.append(stack)

    delta = 0.0
    if has_vt and has_nt and directions.any():
        lo, hi = -8.0, 8.0
        for _ in range(26):
            mid = 0.5 * (lo + hi)
            ratio = _ratio_for_maps(
                _class_maps_for_bias(fields, directions, mid, stride=4), class_ids
            )
            if ratio < spec.target_necrosis_ratio:
                lo = mid
            else:
                hi = mid
        delta = 0.5 * (lo + hi)

    maps = _class_maps_for_bias(fields, directions, delta)
    achieved = _ratio_for_maps(maps, class_ids)
    if np.isnan(achieved):
        achieved = 0.0 if not has_nt else 1.0
    if abs(achieved - spec.target_necrosis_ratio) > _RATIO_TOLERANCE:
        raise ValueError(
            f"unreachable ratio: target {spec.target_necrosis_ratio:.3f}, "
            f"achievable {achieved:.3f}"
        )

    present: set[int] = set()
    slides: list[WsiPyramid] = []
    masks: list[LabelMask] = []
    lut = np.array(class_ids, dtype=np.uint8)
    for slide_idx, class_map in enumerate(maps):
        present.update(int(v) for v in np.unique(class_map))
        raster = _render_texture(rng, class_map, class_ids, spec.texture_params)
        slide_id = f"{spec.case_id}_s{slide_idx}"
        slides.append(build_pyramid(raster, slide_id=slide_id, case_id=spec.case_id))
        masks.append(LabelMask(slide_id=slide_id, round=0, data=lut[class_map]))
    missing = set(range(len(class_ids))) - present
    if missing:
        raise AssertionError(f"classes {missing} never occurred despite bumps")
    return slides, masks, float(achieved)


def sparse_annotation(
    truth: LabelMask,
    fraction: float,
    rng: np.random.Generator,
    class_weights: Mapping[int, float] | None = None,
    radius_range: tuple[int, int] = (40, 120),
) -> LabelMask:
    """Partial round-0 annotation: compact blobs inside single-class regions.

    ``class_weights`` biases which classes get annotated, mimicking an
    annotator who outlines characteristic regions and skips challenging
    ones; a weight of zero leaves a class entirely unlabeled.
    """
    data = truth.data
    h, w = data.shape
    target_px = int(fraction * h * w)
    present = [int(c) for c in np.unique(data) if c != UNLABELED]
    weights = np.array(
        [1.0 if class_weights is None else float(class_weights.get(c, 1.0)) for c in present]
    )
    if weights.sum() <= 0:
        raise ValueError("all class weights are zero")
    weights = weights / weights.sum()

    ann = np.full((h, w), UNLABELED, dtype=np.uint8)
    labeled = 0
    for _ in range(4000):
        if labeled >= target_px:
            break
        k = int(rng.choice(present, p=weights))
        cy = cx = -1
        for _try in range(60):
            y, x = int(rng.integers(0, h)), int(rng.integers(0, w))
            if data[y, x] == k:
                cy, cx = y, x
                break
        if cy < 0:
            continue
        ry = int(rng.integers(radius_range[0], radius_range[1] + 1))
        rx = int(ry * rng.uniform(0.6, 1.4))
        y0, y1 = max(0, cy - ry), min(h, cy + ry + 1)
        x0, x1 = max(0, cx - rx), min(w, cx + rx + 1)
        yy = (np.arange(y0, y1) - cy)[:, None] / max(ry, 1)
        xx = (np.arange(x0, x1) - cx)[None, :] / max(rx, 1)
        blob = (yy**2 + xx**2) <= 1.0
        window = ann[y0:y1, x0:x1]
        hit = blob & (data[y0:y1, x0:x1] == k) & (window == UNLABELED)
        window[hit] = k
        labeled += int(hit.sum())
    return LabelMask(slide_id=truth.slide_id, round=0, data=ann)
