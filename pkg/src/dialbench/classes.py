"""Tissue class taxonomy shared across the workbench.

Masks are 8-bit rasters whose values are either one of the seven class ids
below or the ``UNLABELED`` sentinel (255). Model predictions never contain
``UNLABELED``; annotation masks usually do.
"""
from __future__ import annotations

from enum import IntEnum

import numpy as np

UNLABELED = 255
N_CLASSES = 7


class TissueClass(IntEnum):
    VIABLE_TUMOR = 0
    NECROSIS_WITH_BONE = 1
    NECROSIS_WITHOUT_BONE = 2
    NORMAL_BONE = 3
    NORMAL_TISSUE = 4
    CARTILAGE = 5
    BLANK = 6


CLASS_NAMES = {
    TissueClass.VIABLE_TUMOR: "viable_tumor",
    TissueClass.NECROSIS_WITH_BONE: "necrosis_with_bone",
    TissueClass.NECROSIS_WITHOUT_BONE: "necrosis_without_bone",
    TissueClass.NORMAL_BONE: "normal_bone",
    TissueClass.NORMAL_TISSUE: "normal_tissue",
    TissueClass.CARTILAGE: "cartilage",
    TissueClass.BLANK: "blank",
}

# Viable plus these two make up "overall tumor" for the case-level ratio.
NECROTIC_CLASSES = (TissueClass.NECROSIS_WITH_BONE, TissueClass.NECROSIS_WITHOUT_BONE)

# Display colors, indexed by class id: red, blue, yellow, green, orange,
# brown, gray.
DEFAULT_PALETTE = np.array(
    [
        (220, 20, 20),
        (30, 30, 220),
        (235, 220, 30),
        (30, 180, 30),
        (245, 150, 20),
        (140, 80, 20),
        (128, 128, 128),
    ],
    dtype=np.uint8,
)


class MaskFormatError(ValueError):
    """A mask raster or mask file contains values outside {0..6, 255}."""


def validate_mask_values(data: np.ndarray) -> None:
    """Raise :class:`MaskFormatError` if ``data`` holds an invalid value."""
    bad = (data >= N_CLASSES) & (data != UNLABELED)
    if bad.any():
        value = int(data[bad][0]) if data[bad].size else -1
        raise MaskFormatError(f"mask contains invalid class value {value}")
