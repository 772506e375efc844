"""Intricacy scoring over a (time, height, width, channels) feature volume.

Each position gets a score combining two views of its (2r+1)^3 neighborhood
(edge-replicated at volume borders, center included):

* divergence of the softmaxed neighbor-similarity distribution from uniform,
  KL(uniform || p_sim) -- peaked similarity means the neighborhood is mixed;
* mean cosine distance between the center feature and each neighbor.

Homogeneous neighborhoods score exactly zero on both terms.  The highest
scoring fraction of positions is routed to the attention path; the rest is
left for cheap motion-compensated reuse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import InvalidArgument, InvalidData
from .parallel import ordered_map

_LOG_FLOOR = 1e-12
_NORM_FLOOR = 1e-12


@dataclass
class EmbeddingVolume:
    """Feature field shaped (l, h, w, d_q)."""

    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 4:
            raise InvalidArgument(
                f"embedding volume must be 4-D, got shape {self.features.shape}"
            )
        if self.features.size and not np.isfinite(self.features).all():
            raise InvalidData("embedding features must be finite")

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.features.shape[:3]


@dataclass
class NsmScoreVolume:
    """Per-position scores plus a flag for zero-norm (degenerate) centers."""

    scores: np.ndarray
    radius: int
    degenerate: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.degenerate is None:
            self.degenerate = np.zeros(self.scores.shape, dtype=bool)


@dataclass
class SelectionResult:
    selected_coords: list[tuple[int, int, int]]
    selected_tokens: np.ndarray  # (n_selected, d_q)
    complement_coords: list[tuple[int, int, int]]
    scores: NsmScoreVolume


def neighborhood_offsets(radius: int) -> list[tuple[int, int, int]]:
    """Offsets of the (2r+1)^3 cube in fixed (ds, du, dv) raster order."""
    span = range(-radius, radius + 1)
    return list(product(span, span, span))


def _gather_neighborhood(
    vol: EmbeddingVolume, coord: tuple[int, int, int], radius: int
) -> np.ndarray:
    l, h, w = vol.grid_shape
    s, u, v = coord
    if not (0 <= s < l and 0 <= u < h and 0 <= v < w):
        raise InvalidArgument(f"coordinate {coord} out of bounds for grid {(l, h, w)}")
    rows = []
    for ds, du, dv in neighborhood_offsets(radius):
        rows.append(
            vol.features[
                min(max(s + ds, 0), l - 1),
                min(max(u + du, 0), h - 1),
                min(max(v + dv, 0), w - 1),
            ]
        )
    return np.stack(rows, axis=0)


def similarity_distribution(
    vol: EmbeddingVolume, coord: tuple[int, int, int], radius: int
) -> np.ndarray:
    """Softmax of dot products between the center feature and its neighborhood."""
    if radius < 1:
        raise InvalidArgument(f"radius must be >= 1, got {radius}")
    local = _gather_neighborhood(vol, coord, radius)
    center = vol.features[coord]
    dots = local @ center
    shifted = dots - dots.max()
    e = np.exp(shifted)
    return e / e.sum()


def nsm_components(
    vol: EmbeddingVolume,
    coord: tuple[int, int, int],
    radius: int,
    as_printed: bool = False,
) -> tuple[float, float, bool]:
    """Return (kl_term, cos_term, degenerate) at one coordinate.

    ``as_printed`` flips the KL term to sum(p_u * log(p_sim / p_u)), the
    sign-reversed variant kept only for comparison runs; the default is the
    proper nonnegative divergence KL(p_u || p_sim).
    """
    if radius < 1:
        raise InvalidArgument(f"radius must be >= 1, got {radius}")
    local = _gather_neighborhood(vol, coord, radius)
    center = vol.features[coord]
    center_norm = float(np.sqrt(center @ center))
    if center_norm < _NORM_FLOOR:
        return 0.0, 0.0, True
    n_b = local.shape[0]
    dots = local @ center
    shifted = dots - dots.max()
    e = np.exp(shifted)
    p_sim = e / e.sum()
    p_u = 1.0 / n_b
    log_ratio = np.log(p_u) - np.log(np.maximum(p_sim, _LOG_FLOOR))
    kl = float(np.sum(p_u * log_ratio))
    if as_printed:
        kl = -kl
    norms = np.sqrt(np.einsum("ij,ij->i", local, local))
    cosines = dots / np.maximum(norms * center_norm, _NORM_FLOOR)
    cos_term = float(np.mean(1.0 - cosines))
    return kl, cos_term, False


def nsm_score(
    vol: EmbeddingVolume,
    coord: tuple[int, int, int],
    radius: int,
    as_printed: bool = False,
) -> float:
    kl, cos_term, degenerate = nsm_components(vol, coord, radius, as_printed)
    if degenerate:
        return 0.0
    return kl + cos_term


def score_volume(
    vol: EmbeddingVolume, radius: int, threads: int = 1, as_printed: bool = False
) -> NsmScoreVolume:
    """Score every position; rows of the (s, u) plane may run in parallel."""
    l, h, w = vol.grid_shape
    scores = np.zeros((l, h, w), dtype=np.float64)
    degenerate = np.zeros((l, h, w), dtype=bool)

    def run_row(su: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        s, u = su
        row = np.zeros(w)
        deg = np.zeros(w, dtype=bool)
        for v in range(w):
            kl, cos_term, is_deg = nsm_components(vol, (s, u, v), radius, as_printed)
            row[v] = kl + cos_term
            deg[v] = is_deg
        return row, deg

    coords = [(s, u) for s in range(l) for u in range(h)]
    for (s, u), (row, deg) in zip(coords, ordered_map(run_row, coords, threads)):
        scores[s, u] = row
        degenerate[s, u] = deg
    return NsmScoreVolume(scores, radius, degenerate)


def select_tokens(
    vol: EmbeddingVolume,
    radius: int,
    fraction: float,
    threads: int = 1,
) -> SelectionResult:
    """Pick the top-scoring fraction of positions.

    Order is descending score with raster-order (s, then u, then v)
    tie-breaking, so identical inputs always produce the identical list.
    The complement is returned in raster order.
    """
    l, h, w = vol.grid_shape
    total = l * h * w
    if total == 0:
        raise InvalidArgument("cannot select from an empty volume")
    if not (0.0 < fraction <= 1.0):
        raise InvalidArgument(f"fraction must be in (0, 1], got {fraction}")
    vol_scores = score_volume(vol, radius, threads=threads)
    flat = vol_scores.scores.reshape(-1)
    s_idx, u_idx, v_idx = np.unravel_index(np.arange(total), (l, h, w))
    order = np.lexsort((v_idx, u_idx, s_idx, -flat))
    n_sel = math.ceil(fraction * total)
    chosen = order[:n_sel]
    chosen_mask = np.zeros(total, dtype=bool)
    chosen_mask[chosen] = True
    selected = [(int(s_idx[i]), int(u_idx[i]), int(v_idx[i])) for i in chosen]
    complement = [
        (int(s_idx[i]), int(u_idx[i]), int(v_idx[i]))
        for i in range(total)
        if not chosen_mask[i]
    ]
    tokens = np.stack([vol.features[c] for c in selected], axis=0)
    return SelectionResult(selected, tokens, complement, vol_scores)
