"""modvid: modulo (self-reset) video sampling and reconstruction toolkit."""

__version__ = "0.1.0"

from .modulo_core import (  # noqa: F401
    BinaryFoldMask,
    FoldCountMap,
    IntClip,
    OraclePredictor,
    ZeroPredictor,
    apply_mask_update,
    fold_clip,
    masks_from_counts,
    run_inference,
    sliding_window_reconstruct,
)
