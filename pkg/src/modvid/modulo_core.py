"""Folding model for self-reset sensors and the iterative unfold recursion.

A B-bit ground-truth clip relates to its A-bit folded observation through
per-pixel wrap counts::

    folded = truth mod 2^A        truth = folded + 2^A * counts

The counts factor into nested binary masks (the order-k mask marks pixels
wrapped at least k times), and reconstruction adds ``2^A * mask`` per
predicted order until the predictor reports an all-zero mask or the
``2^(B-A)`` iteration budget is exhausted.  Everything here is exact integer
arithmetic; no value is ever rounded or re-truncated between iterations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import InvalidArgument, InvalidData, PredictorContractError

# A predictor maps the current running clip to the next-order mask.  It may
# return a BinaryFoldMask or a bare {0,1} array of the clip's shape; the
# inference driver stamps the order.
MaskPredictor = Callable[["IntClip"], Union["BinaryFoldMask", np.ndarray]]


@dataclass
class IntClip:
    """Integer video clip, frames shaped (n_frames, height, width, channels).

    ``last_index`` is the global stream index of the final frame; sliding
    windows use it to locate the clip inside a longer video.
    """

    frames: np.ndarray
    bit_depth: int
    last_index: Optional[int] = None

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4:
            raise InvalidArgument(
                f"clip frames must be 4-D (n, h, w, c), got shape {frames.shape}"
            )
        if frames.size and not np.issubdtype(frames.dtype, np.integer):
            raise InvalidData("clip frames must be integer-valued")
        self.frames = frames.astype(np.int64, copy=False)
        if self.bit_depth < 1:
            raise InvalidArgument(f"bit_depth must be >= 1, got {self.bit_depth}")
        if self.last_index is None:
            self.last_index = self.frames.shape[0] - 1

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def validate(self) -> "IntClip":
        if self.frames.size:
            lo = int(self.frames.min())
            hi = int(self.frames.max())
            if lo < 0:
                raise InvalidData(f"negative sample value {lo}")
            if hi >= (1 << self.bit_depth):
                raise InvalidData(
                    f"sample value {hi} exceeds {self.bit_depth}-bit range"
                )
        return self


@dataclass
class FoldCountMap:
    """Per-pixel wrap counts, same shape as the clip frames."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.size and not np.issubdtype(counts.dtype, np.integer):
            raise InvalidData("fold counts must be integers")
        self.counts = counts.astype(np.int64, copy=False)
        if self.counts.size and int(self.counts.min()) < 0:
            raise InvalidData("fold counts must be non-negative")

    def max_count(self) -> int:
        return int(self.counts.max()) if self.counts.size else 0


@dataclass
class BinaryFoldMask:
    """Order-k indicator of pixels wrapped at least k times."""

    bits: np.ndarray
    order: int

    def __post_init__(self):
        bits = np.asarray(self.bits)
        self.bits = bits.astype(np.uint8, copy=False)
        if self.order < 1:
            raise InvalidArgument(f"mask order must be >= 1, got {self.order}")
        if self.bits.size and not np.isin(self.bits, (0, 1)).all():
            raise InvalidData("mask bits must be 0 or 1")


def fold_clip(clip: IntClip, target_bits: int) -> tuple[IntClip, FoldCountMap]:
    """Fold a clip to ``target_bits``, returning the wrapped clip and counts.

    Exact: ``clip.frames == folded.frames + (counts << target_bits)``.
    """
    if target_bits >= clip.bit_depth:
        raise InvalidArgument(
            f"target bits {target_bits} must be below clip depth {clip.bit_depth}"
        )
    if target_bits < 1:
        raise InvalidArgument("target bits must be >= 1")
    if clip.frames.size and int(clip.frames.min()) < 0:
        raise InvalidData("cannot fold negative sample values")
    folded = clip.frames & ((1 << target_bits) - 1)
    counts = clip.frames >> target_bits
    return (
        IntClip(folded, target_bits, clip.last_index),
        FoldCountMap(counts),
    )


def masks_from_counts(counts: FoldCountMap) -> list[BinaryFoldMask]:
    """Factor counts into the nested per-order masks.

    Returned list has length ``max(counts)``; the masks sum back to the
    counts exactly and satisfy ``mask[k+1] <= mask[k]`` pointwise.
    """
    top = counts.max_count()
    return [
        BinaryFoldMask((counts.counts >= k).astype(np.uint8), order=k)
        for k in range(1, top + 1)
    ]


def apply_mask_update(clip: IntClip, mask: BinaryFoldMask, bits_a: int) -> IntClip:
    """Add ``2^bits_a`` wherever the mask is set; bit depth grows as needed."""
    if mask.bits.shape != clip.frames.shape:
        raise InvalidArgument(
            f"mask shape {mask.bits.shape} != clip shape {clip.frames.shape}"
        )
    frames = clip.frames + (mask.bits.astype(np.int64) << bits_a)
    depth = clip.bit_depth
    if frames.size:
        depth = max(depth, int(frames.max()).bit_length())
    return IntClip(frames, depth, clip.last_index)


def _predicted_bits(predictor: MaskPredictor, clip: IntClip) -> np.ndarray:
    out = predictor(clip)
    bits = out.bits if isinstance(out, BinaryFoldMask) else np.asarray(out)
    if bits.shape != clip.frames.shape:
        raise PredictorContractError(
            f"predictor returned shape {bits.shape}, expected {clip.frames.shape}"
        )
    if bits.size and not np.isin(bits, (0, 1)).all():
        raise PredictorContractError("predictor returned non-binary values")
    return bits.astype(np.uint8, copy=False)


def run_inference(
    clip_m: IntClip, predictor: MaskPredictor, target_bits: int
) -> tuple[IntClip, list[BinaryFoldMask]]:
    """Iteratively unfold ``clip_m`` using ``predictor`` for each order.

    Runs at most ``2^(target_bits - A) - 1`` mask applications and stops
    early as soon as the predicted mask is all-zero.  Returns the final clip
    at ``target_bits`` depth together with every applied (nonzero) mask.
    """
    bits_a = clip_m.bit_depth
    if target_bits <= bits_a:
        raise InvalidArgument(
            f"target depth {target_bits} must exceed folded depth {bits_a}"
        )
    budget = 1 << (target_bits - bits_a)
    current = clip_m
    masks: list[BinaryFoldMask] = []
    k = 1
    while k < budget:
        bits = _predicted_bits(predictor, current)
        if not bits.any():
            break
        mask = BinaryFoldMask(bits, order=k)
        current = apply_mask_update(current, mask, bits_a)
        masks.append(mask)
        k += 1
    return IntClip(current.frames, target_bits, clip_m.last_index), masks


def sliding_window_reconstruct(
    video: IntClip,
    predictor: MaskPredictor,
    clip_len: int,
    target_bits: int,
    include_leading: bool = False,
) -> IntClip:
    """Reconstruct a stream with step-1 windows of ``clip_len + 1`` frames.

    Each frame index T >= clip_len is taken from the window ending at T.
    With ``include_leading`` the first ``clip_len`` frames are also emitted,
    taken from the earliest full window (the only one containing them as a
    complete clip).
    """
    n = video.n_frames
    window = clip_len + 1
    if clip_len < 1:
        raise InvalidArgument("clip_len must be >= 1")
    if n < window:
        raise InvalidArgument(
            f"video of {n} frames is shorter than window of {window}"
        )
    lead = clip_len if include_leading else 0
    out = np.zeros((n - clip_len + lead,) + video.frames.shape[1:], dtype=np.int64)
    for t in range(clip_len, n):
        clip = IntClip(video.frames[t - clip_len : t + 1], video.bit_depth, last_index=t)
        start = getattr(predictor, "start_window", None)
        if start is not None:
            start(clip)
        recon, _ = run_inference(clip, predictor, target_bits)
        if t == clip_len and include_leading:
            out[:clip_len] = recon.frames[:clip_len]
        out[t - clip_len + lead] = recon.frames[-1]
    return IntClip(out, target_bits)


class OraclePredictor:
    """Replays ground-truth masks: predicts 1 where the remaining gap to the
    truth is at least one fold.  Inverts folding exactly, independent of any
    learned model."""

    def __init__(self, truth: IntClip, folded_bits: int):
        self.truth = truth
        self.folded_bits = folded_bits

    def __call__(self, clip: IntClip) -> np.ndarray:
        stop = clip.last_index + 1
        gt = self.truth.frames[stop - clip.n_frames : stop]
        if gt.shape != clip.frames.shape:
            raise InvalidArgument(
                "oracle truth does not cover the requested window"
            )
        return ((gt - clip.frames) >> self.folded_bits >= 1).astype(np.uint8)


class ZeroPredictor:
    """Always predicts the empty mask; reconstruction equals the input."""

    def __call__(self, clip: IntClip) -> np.ndarray:
        return np.zeros_like(clip.frames, dtype=np.uint8)
