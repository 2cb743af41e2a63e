"""Interactive segmentation workbench: train, segment, correct, finetune.

The package is organized around a tiled-slide data model (`wsi`, `rle`,
`synthetic`), a patch pipeline (`patches`, `patch_store`), a three-stream
multi-magnification segmentation network (`dmmn`, `training`, `checkpoints`),
whole-slide inference (`inference`), the interactive round engine (`rounds`),
case-level assessment (`assess`), and an HTTP service (`service`).
"""

__version__ = "0.1.0"
