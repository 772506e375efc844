"""Exhaustive block-matching motion estimation and binary mask warping.

Frames are partitioned into non-overlapping ``block x block`` tiles (ragged
edge tiles are clipped to the frame).  For each tile the displacement
minimizing the sum of absolute differences against the previous frame is
chosen over a (2*radius+1)^2 window; ties go to the smallest |dx|+|dy| and
then to (dx, dy) raster order, so constant regions report zero motion.

Displacements follow pullback convention: the warped mask samples
``prev[x - dx, y - dy]`` with border clamping, where x indexes rows.
Nearest-neighbor sampling keeps masks binary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidArgument
from .parallel import ordered_map

DEFAULT_BLOCK = 8
DEFAULT_RADIUS = 7


@dataclass
class FlowField:
    """Per-block integer displacement; dx moves rows, dy moves columns."""

    dx: np.ndarray  # (grid_h, grid_w)
    dy: np.ndarray
    block: int
    radius: int

    def __post_init__(self):
        self.dx = np.asarray(self.dx, dtype=np.int64)
        self.dy = np.asarray(self.dy, dtype=np.int64)
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise InvalidArgument("flow components must share a 2-D grid shape")
        if self.dx.size and (
            np.abs(self.dx).max() > self.radius or np.abs(self.dy).max() > self.radius
        ):
            raise InvalidArgument("flow displacement exceeds the search radius")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.dx.shape


def _candidate_shifts(radius: int) -> list[tuple[int, int]]:
    shifts = [
        (dx, dy)
        for dx in range(-radius, radius + 1)
        for dy in range(-radius, radius + 1)
    ]
    # argmin over this ordering realizes the tie-break: cheapest motion first,
    # then raster order on (dx, dy).
    shifts.sort(key=lambda s: (abs(s[0]) + abs(s[1]), s[0], s[1]))
    return shifts


def _shifted(frame: np.ndarray, dx: int, dy: int) -> np.ndarray:
    h, w = frame.shape[:2]
    rows = np.clip(np.arange(h) - dx, 0, h - 1)
    cols = np.clip(np.arange(w) - dy, 0, w - 1)
    return frame[np.ix_(rows, cols)]


def estimate_flow(
    prev: np.ndarray,
    cur: np.ndarray,
    block: int = DEFAULT_BLOCK,
    radius: int = DEFAULT_RADIUS,
    threads: int = 1,
) -> FlowField:
    """Best integer displacement per tile of ``cur`` relative to ``prev``."""
    prev = np.asarray(prev)
    cur = np.asarray(cur)
    if prev.shape != cur.shape:
        raise InvalidArgument(f"frame shapes differ: {prev.shape} vs {cur.shape}")
    if prev.ndim not in (2, 3):
        raise InvalidArgument("frames must be 2-D or (h, w, c)")
    h, w = prev.shape[:2]
    if block < 1 or block > h or block > w:
        raise InvalidArgument(f"block {block} does not fit a {h}x{w} frame")
    if radius < 0:
        raise InvalidArgument("radius must be >= 0")
    prev_f = prev.astype(np.float64).reshape(h, w, -1)
    cur_f = cur.astype(np.float64).reshape(h, w, -1)
    row_bounds = np.arange(0, h, block)
    col_bounds = np.arange(0, w, block)
    grid_h, grid_w = len(row_bounds), len(col_bounds)
    shifts = _candidate_shifts(radius)

    def sad_for(shift: tuple[int, int]) -> np.ndarray:
        diff = np.abs(cur_f - _shifted(prev_f, *shift)).sum(axis=2)
        per_rows = np.add.reduceat(diff, row_bounds, axis=0)
        return np.add.reduceat(per_rows, col_bounds, axis=1)

    sads = np.stack(ordered_map(sad_for, shifts, threads), axis=0)
    best = np.argmin(sads, axis=0)  # first minimum wins: tie-break is in order
    shift_arr = np.asarray(shifts, dtype=np.int64)
    return FlowField(
        dx=shift_arr[best, 0], dy=shift_arr[best, 1], block=block, radius=radius
    )


def warp_mask(mask_prev: np.ndarray, flow: FlowField) -> np.ndarray:
    """Pull the previous mask forward through the flow (nearest neighbor)."""
    mask_prev = np.asarray(mask_prev)
    if mask_prev.ndim not in (2, 3):
        raise InvalidArgument("mask must be 2-D or (h, w, c)")
    h, w = mask_prev.shape[:2]
    gh, gw = flow.grid_shape
    dx_px = np.repeat(np.repeat(flow.dx, flow.block, axis=0), flow.block, axis=1)[:h, :w]
    dy_px = np.repeat(np.repeat(flow.dy, flow.block, axis=0), flow.block, axis=1)[:h, :w]
    if dx_px.shape != (h, w):
        raise InvalidArgument(
            f"flow grid {gh}x{gw} (block {flow.block}) does not cover a {h}x{w} mask"
        )
    rows = np.clip(np.arange(h)[:, None] - dx_px, 0, h - 1)
    cols = np.clip(np.arange(w)[None, :] - dy_px, 0, w - 1)
    return mask_prev[rows, cols]


def write_flow(flow: FlowField) -> str:
    """Text dump: header lines then one ``dx dy`` row per block in raster order."""
    gh, gw = flow.grid_shape
    lines = [
        f"block: {flow.block}",
        f"radius: {flow.radius}",
        f"grid: {gh} {gw}",
    ]
    for i in range(gh):
        for j in range(gw):
            lines.append(f"{int(flow.dx[i, j])} {int(flow.dy[i, j])}")
    return "\n".join(lines) + "\n"


def read_flow(text: str) -> FlowField:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 3:
        raise FormatError("flow dump too short")
    try:
        block = int(lines[0].split(":")[1])
        radius = int(lines[1].split(":")[1])
        gh, gw = (int(tok) for tok in lines[2].split(":")[1].split())
    except (IndexError, ValueError) as exc:
        raise FormatError(f"bad flow header: {exc}") from exc
    if len(lines) != 3 + gh * gw:
        raise FormatError(
            f"expected {gh * gw} flow rows, found {len(lines) - 3}"
        )
    dx = np.zeros((gh, gw), dtype=np.int64)
    dy = np.zeros((gh, gw), dtype=np.int64)
    for idx, line in enumerate(lines[3:]):
        try:
            a, b = (int(tok) for tok in line.split())
        except ValueError as exc:
            raise FormatError(f"bad flow row {idx}: {line!r}") from exc
        dx[idx // gw, idx % gw] = a
        dy[idx // gw, idx % gw] = b
    return FlowField(dx=dx, dy=dy, block=block, radius=radius)
