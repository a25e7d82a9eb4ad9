"""Weakly supervised segmentation of satellite image time series from image-level labels.

Submodules:
    data      synthetic SITS generator, tensor/manifest file formats
    encoder   temporal-then-spatial transformer with per-class tokens
    cam       raw CAMs, fusion, filtering, pseudo masks, auxiliary BCE
    clues     prototype bank, Sinkhorn assignment, contrastive clue loss
    affinity  temporal-to-class attention, affinity propagation, alignment loss
    cbcam     clue-based CAMs from the prototype bank
    training  classifier / pseudo-label / segmentation pipelines
    metrics   confusion-matrix evaluation
    cli       command-line entry point
"""

__version__ = "0.1.0"

IGNORE = 255
