"""Patch extraction, elastic deformation, balancing, splitting, weighting.

Geometry convention: a patch is anchored on a full-resolution window
[x0, x0+P) x [y0, y0+P). The half- and quarter-resolution companions cover
2x and 4x the physical extent around the same center, so their top-left
corners sit at ((x0 - P/2) / 2, ...) and ((x0 - 3P/2) / 4, ...) in their own
pixel grids. Reads beyond slide bounds are zero-filled for imagery and
UNLABELED-filled for targets, matching the inference-time padding rule.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import map_coordinates, zoom

from .classes import N_CLASSES, UNLABELED
from .wsi import LabelMask, WsiPyramid

ANNOTATED_FRACTION = 0.01  # strictly-more-than rule for emitting a patch
RARE_FRACTION = 0.7  # class is rare below this share of the max class
DEFAULT_DEFORM_ALPHA = 10.0
DEFORM_GRID = 8
DEFAULT_KMAX = 3


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed from heterogeneous key parts."""
    key = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1


@dataclass
class PatchRecord:
    """Co-centered three-magnification image patches plus the label target."""

    slide_id: str
    center: tuple[int, int]  # (x, y) in full-resolution coordinates
    img20: np.ndarray
    img10: np.ndarray
    img5: np.ndarray
    target: np.ndarray
    round: int = 0
    deformed: bool = False

    @property
    def patch_size(self) -> int:
        return self.target.shape[0]


def crop_padded(
    level: np.ndarray, x0: int, y0: int, size: int, fill: int = 0
) -> np.ndarray:
    """Crop a size x size window, filling out-of-bounds area with ``fill``."""
    h, w = level.shape[:2]
    shape = (size, size) + level.shape[2:]
    out = np.full(shape, fill, dtype=level.dtype)
    sy0, sy1 = max(0, y0), min(h, y0 + size)
    sx0, sx1 = max(0, x0), min(w, x0 + size)
    if sy0 < sy1 and sx0 < sx1:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = level[sy0:sy1, sx0:sx1]
    return out


def read_window(slide: WsiPyramid, x0: int, y0: int, size: int):
    """Read the three co-centered magnification windows for one grid cell."""
    img20 = crop_padded(slide.levels[0], x0, y0, size)
    img10 = crop_padded(slide.levels[1], (x0 - size // 2) // 2, (y0 - size // 2) // 2, size)
    img5 = crop_padded(slide.levels[2], (x0 - 3 * size // 2) // 4, (y0 - 3 * size // 2) // 4, size)
    return img20, img10, img5


def grid_origins(extent: int, stride: int) -> range:
    return range(0, extent, stride)


def extract_patches(
    slide: WsiPyramid,
    mask: LabelMask,
    stride: int | None = None,
    patch_size: int = 256,
    target_mask: LabelMask | None = None,
) -> list[PatchRecord]:
    """Grid-scan the slide, emitting patches that are annotated enough.

    A cell is emitted iff strictly more than 1% of its target pixels carry a
    label in ``mask``. When ``target_mask`` is given it supplies the emitted
    patches' label rasters while ``mask`` still decides emission (used for
    correction rounds, where the fresh corrections gate extraction but the
    merged annotation provides the labels).
    """
    if mask.data.shape != (slide.height, slide.width):
        raise ValueError("mask dimensions do not match slide")
    if target_mask is not None and target_mask.data.shape != mask.data.shape:
        raise ValueError("target mask dimensions do not match selector mask")
    p = patch_size
    stride = p if stride is None else stride
    threshold = ANNOTATED_FRACTION * p * p
    label_src = mask if target_mask is None else target_mask
    records = []
    for y0 in grid_origins(slide.height, stride):
        for x0 in grid_origins(slide.width, stride):
            sel = crop_padded(mask.data, x0, y0, p, fill=UNLABELED)
            labeled = int((sel != UNLABELED).sum())
            if labeled <= threshold:
                continue
            target = (
                sel
                if target_mask is None
                else crop_padded(target_mask.data, x0, y0, p, fill=UNLABELED)
            )
            img20, img10, img5 = read_window(slide, x0, y0, p)
            records.append(
                PatchRecord(
                    slide_id=slide.slide_id,
                    center=(x0 + p // 2, y0 + p // 2),
                    img20=img20,
                    img10=img10,
                    img5=img5,
                    target=target,
                    round=label_src.round,
                )
            )
    return records


def elastic_deform(patch: PatchRecord, seed: int, alpha: float = DEFAULT_DEFORM_ALPHA,
                   grid: int = DEFORM_GRID) -> PatchRecord:
    """Warp a patch by a smooth random displacement field.

    Displacements are Gaussian with standard deviation ``alpha`` pixels on a
    coarse ``grid`` x ``grid`` lattice, upsampled bicubically. Images are
    resampled bilinearly, the target nearest-neighbor so no new labels
    appear. Identical seeds give identical bytes; ``alpha=0`` is the exact
    identity.
    """
    rng = np.random.default_rng(seed)
    p = patch.patch_size
    factor = p / grid
    dx = zoom(rng.normal(0.0, alpha, (grid, grid)), factor, order=3, mode="reflect",
              grid_mode=True)
    dy = zoom(rng.normal(0.0, alpha, (grid, grid)), factor, order=3, mode="reflect",
              grid_mode=True)
    yy, xx = np.meshgrid(np.arange(p, dtype=np.float64), np.arange(p, dtype=np.float64),
                         indexing="ij")
    coords = np.stack([yy + dy, xx + dx])

    def warp_image(img: np.ndarray) -> np.ndarray:
        out = np.empty_like(img)
        for ch in range(img.shape[2]):
            vals = map_coordinates(img[:, :, ch].astype(np.float64), coords, order=1,
                                   mode="reflect")
            out[:, :, ch] = np.clip(np.rint(vals), 0, 255).astype(np.uint8)
        return out

    target = map_coordinates(patch.target, coords, order=0, mode="reflect")
    return replace(
        patch,
        img20=warp_image(patch.img20),
        img10=warp_image(patch.img10),
        img5=warp_image(patch.img5),
        target=target,
        deformed=True,
    )


def patch_class_counts(patches: list[PatchRecord]) -> np.ndarray:
    counts = np.zeros(N_CLASSES, dtype=np.int64)
    for p in patches:
        labeled = p.target[p.target != UNLABELED]
        counts += np.bincount(labeled.ravel(), minlength=N_CLASSES)[:N_CLASSES]
    return counts


def modal_class(target: np.ndarray) -> int | None:
    """Most frequent labeled class of a target, ties to the lowest id."""
    labeled = target[target != UNLABELED]
    if labeled.size == 0:
        return None
    return int(np.argmax(np.bincount(labeled.ravel(), minlength=N_CLASSES)[:N_CLASSES]))


def rare_classes(counts: np.ndarray) -> set[int]:
    """Classes strictly below 70% of the best-represented class's count."""
    top = int(counts.max())
    if top == 0:
        return set()
    return {c for c in range(N_CLASSES) if counts[c] < RARE_FRACTION * top}


def balance_by_deformation(
    patches: list[PatchRecord],
    seed: int = 0,
    k_max: int = DEFAULT_KMAX,
    alpha: float = DEFAULT_DEFORM_ALPHA,
) -> list[PatchRecord]:
    """Duplicate rare-class patches through elastic deformation.

    Round-robin passes deform each patch whose modal labeled class is rare,
    once per pass, until no class is rare or every rare-class patch has been
    deformed ``k_max`` times. The input patches are always retained.
    """
    result = list(patches)
    deform_count = [0] * len(patches)
    modal = [modal_class(p.target) for p in patches]
    for _pass in range(k_max):
        rare = rare_classes(patch_class_counts(result))
        if not rare:
            break
        eligible = [
            i for i, m in enumerate(modal) if m is not None and m in rare
            and deform_count[i] < k_max
        ]
        if not eligible:
            break
        for i in eligible:
            deform_count[i] += 1
            result.append(
                elastic_deform(
                    patches[i],
                    seed=stable_seed(seed, "balance", i, deform_count[i]),
                    alpha=alpha,
                )
            )
    return result


@dataclass(frozen=True)
class LossWeights:
    """Per-class cross-entropy weights, 1 - p_c / sum(p)."""

    w: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.w) != N_CLASSES:
            raise ValueError("expected 7 weights")
        if any(x < 0.0 or x > 1.0 for x in self.w):
            raise ValueError("weights must lie in [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.w, dtype=np.float64)


def compute_weights(counts) -> LossWeights:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != (N_CLASSES,):
        raise ValueError("expected 7 class counts")
    total = counts.sum()
    if total <= 0:
        raise ValueError("cannot weight an empty training set")
    return LossWeights(tuple(float(1.0 - c / total) for c in counts))


@dataclass
class DatasetSplit:
    train_patches: list[PatchRecord]
    val_patches: list[PatchRecord]
    train_counts: np.ndarray
    val_counts: np.ndarray
    train_cases: set[str]
    val_cases: set[str]


def assign_validation_cases(
    case_counts: dict[str, np.ndarray],
    target_fraction: float = 0.2,
    pinned_train: set[str] | None = None,
) -> set[str]:
    """Pick validation cases greedily without overshooting the target share.

    Cases are visited in descending total pixel count; one joins validation
    only if afterwards no class exceeds ``target_fraction`` of its corpus
    total on the validation side. If nothing fits, the case with the
    smallest worst-class overshoot is taken so validation is never empty.
    ``pinned_train`` cases are kept on the training side when any
    alternative exists.
    """
    if len(case_counts) < 2:
        raise ValueError("need at least two cases to split by case")
    pinned_train = pinned_train or set()
    totals = np.zeros(N_CLASSES, dtype=np.float64)
    for c in case_counts.values():
        totals += c
    active = totals > 0

    def worst_fraction(counts: np.ndarray) -> float:
        frac = counts[active] / totals[active]
        return float(frac.max()) if frac.size else 0.0

    order = sorted(case_counts, key=lambda cid: (-case_counts[cid].sum(), cid))
    candidates = [cid for cid in order if cid not in pinned_train]
    if not candidates:
        candidates = order  # everything pinned; fall back to the full list
    val_cases: set[str] = set()
    val_counts = np.zeros(N_CLASSES, dtype=np.float64)
    for cid in candidates:
        if len(val_cases) == len(case_counts) - 1:
            break  # training side must keep at least one case
        after = val_counts + case_counts[cid]
        if worst_fraction(after) <= target_fraction:
            val_cases.add(cid)
            val_counts = after
    if not val_cases:
        best = min(candidates, key=lambda cid: (worst_fraction(case_counts[cid]), cid))
        val_cases.add(best)
    return val_cases


def split_by_case(
    patches: list[PatchRecord],
    case_of: dict[str, str],
    case_counts: dict[str, np.ndarray] | None = None,
    target_fraction: float = 0.2,
    pinned_train: set[str] | None = None,
) -> DatasetSplit:
    """Split patches into train/validation sides with disjoint cases."""
    if case_counts is None:
        case_counts = {}
        for p in patches:
            cid = case_of[p.slide_id]
            case_counts.setdefault(cid, np.zeros(N_CLASSES, dtype=np.int64))
            labeled = p.target[p.target != UNLABELED]
            case_counts[cid] += np.bincount(labeled.ravel(), minlength=N_CLASSES)[:N_CLASSES]
    val_cases = assign_validation_cases(case_counts, target_fraction, pinned_train)
    train_cases = set(case_counts) - val_cases
    train = [p for p in patches if case_of[p.slide_id] in train_cases]
    val = [p for p in patches if case_of[p.slide_id] in val_cases]
    return DatasetSplit(
        train_patches=train,
        val_patches=val,
        train_counts=patch_class_counts(train),
        val_counts=patch_class_counts(val),
        train_cases=train_cases,
        val_cases=val_cases,
    )
