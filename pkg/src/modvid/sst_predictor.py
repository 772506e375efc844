"""Learned fold-mask predictor over sliding video windows.

Pipeline per window: a shared linear patch projection turns each frame into a
grid of embedding cells; cells group into non-overlapping spatiotemporal
tubes; tube descriptors are scored for intricacy and the top fraction become
transformer tokens (no positional embedding -- the decode scatter restores
geometry, so token order is irrelevant); a pre-norm encoder stack applies

    Y = MSA(LN(Z)) + Z
    Z' = MLP(LN(Y)) + Y

with scaled dot-product attention and a GELU MLP of constant token width;
a linear head maps each token to per-pixel fold logits for its tube.  Tubes
not selected fall back to the previous window's mask, motion-compensated by
block-matching flow, so every call still yields a full-frame binary mask.

Training minimizes mean per-pixel binary cross-entropy on the selected tubes
with Adam (default learning rate 1e-4), fully seeded.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import ndtensor as nd
from .errors import (
    FormatError,
    InvalidArgument,
    NumericalFailure,
    TrainingFailure,
)
from .flow_fallback import FlowField, estimate_flow, warp_mask
from .modulo_core import (
    BinaryFoldMask,
    IntClip,
    fold_clip,
    masks_from_counts,
)
from .token_select import EmbeddingVolume, SelectionResult, select_tokens


@dataclass
class ModelConfig:
    frame_height: int = 32
    frame_width: int = 32
    channels: int = 1
    clip_len: int = 4  # window holds clip_len + 1 frames
    bits_a: int = 8
    patch: int = 8
    embed_dim: int = 16  # per-cell feature width
    token_dim: int = 48  # per-tube token width
    n_layers: int = 2
    n_heads: int = 2
    mlp_dim: int = 96
    tube_t: int = 0  # frames per tube; 0 means the whole window
    tube_h: int = 8  # pixels; must be a multiple of patch
    tube_w: int = 8
    radius: int = 1
    fraction: float = 1.0
    tubes_from_pixels: bool = False
    ln_eps: float = 1e-5
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.token_dim % self.n_heads != 0:
            raise InvalidArgument(
                f"token_dim {self.token_dim} not divisible by {self.n_heads} heads"
            )
        if self.tube_h % self.patch or self.tube_w % self.patch:
            raise InvalidArgument("tube spatial size must be a multiple of the patch")
        window = self.clip_len + 1
        tube_t = self.tube_t or window
        if window % tube_t:
            raise InvalidArgument(
                f"tube_t {tube_t} must divide the window of {window} frames"
            )
        if min(self.patch, self.embed_dim, self.token_dim, self.mlp_dim) < 1:
            raise InvalidArgument("model dimensions must be positive")
        if not (0.0 < self.fraction <= 1.0):
            raise InvalidArgument(f"fraction must be in (0, 1], got {self.fraction}")
        return self


@dataclass(frozen=True)
class Geometry:
    """Padded patch/tube layout derived from a ModelConfig."""

    window: int
    height: int
    width: int
    channels: int
    patch: int
    pad_h: int
    pad_w: int
    cells_h: int
    cells_w: int
    tube_t: int
    tube_ch: int  # tube extent in cells
    tube_cw: int
    grid_t: int
    grid_h: int
    grid_w: int

    @property
    def n_cells(self) -> int:
        return self.window * self.cells_h * self.cells_w

    @property
    def cells_per_tube(self) -> int:
        return self.tube_t * self.tube_ch * self.tube_cw

    @property
    def pixels_per_tube(self) -> int:
        return self.tube_t * self.tube_ch * self.tube_cw * self.patch * self.patch

    @property
    def out_per_tube(self) -> int:
        return self.pixels_per_tube * self.channels

    def padded_region(self) -> np.ndarray:
        """Bool (padded_h, padded_w) map of pixels added by zero padding."""
        mask = np.zeros((self.height + self.pad_h, self.width + self.pad_w), dtype=bool)
        if self.pad_h:
            mask[self.height :, :] = True
        if self.pad_w:
            mask[:, self.width :] = True
        return mask


def geometry(cfg: ModelConfig) -> Geometry:
    cfg.validate()
    window = cfg.clip_len + 1
    pad_h = (-cfg.frame_height) % cfg.patch
    pad_w = (-cfg.frame_width) % cfg.patch
    cells_h = (cfg.frame_height + pad_h) // cfg.patch
    cells_w = (cfg.frame_width + pad_w) // cfg.patch
    tube_t = cfg.tube_t or window
    tube_ch = cfg.tube_h // cfg.patch
    tube_cw = cfg.tube_w // cfg.patch
    if cells_h % tube_ch or cells_w % tube_cw:
        raise InvalidArgument(
            f"tube {cfg.tube_h}x{cfg.tube_w} does not tile the padded "
            f"{cells_h * cfg.patch}x{cells_w * cfg.patch} frame"
        )
    return Geometry(
        window=window,
        height=cfg.frame_height,
        width=cfg.frame_width,
        channels=cfg.channels,
        patch=cfg.patch,
        pad_h=pad_h,
        pad_w=pad_w,
        cells_h=cells_h,
        cells_w=cells_w,
        tube_t=tube_t,
        tube_ch=tube_ch,
        tube_cw=tube_cw,
        grid_t=window // tube_t,
        grid_h=cells_h // tube_ch,
        grid_w=cells_w // tube_cw,
    )


def _tube_feat_in(cfg: ModelConfig, geom: Geometry) -> int:
    if cfg.tubes_from_pixels:
        return geom.pixels_per_tube * geom.channels
    return geom.cells_per_tube * cfg.embed_dim


# -- parameters --------------------------------------------------------------


def init_params(cfg: ModelConfig) -> dict[str, nd.Tensor]:
    """Centered uniform fan-in init; creation order is the checkpoint order."""
    geom = geometry(cfg)
    rng = np.random.default_rng(cfg.seed)
    d = cfg.token_dim

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return nd.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def zeros(shape):
        return nd.Tensor(np.zeros(shape), requires_grad=True)

    def ones(shape):
        return nd.Tensor(np.ones(shape), requires_grad=True)

    patch_in = cfg.patch * cfg.patch * cfg.channels
    params: dict[str, nd.Tensor] = {}
    params["enc_w"] = uniform((patch_in, cfg.embed_dim), patch_in)
    params["enc_b"] = zeros(cfg.embed_dim)
    tube_in = _tube_feat_in(cfg, geom)
    params["tube_w"] = uniform((tube_in, d), tube_in)
    params["tube_b"] = zeros(d)
    for i in range(cfg.n_layers):
        params[f"l{i}_ln1_g"] = ones(d)
        params[f"l{i}_ln1_b"] = zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            params[f"l{i}_{name}"] = uniform((d, d), d)
            params[f"l{i}_b{name[1]}"] = zeros(d)
        params[f"l{i}_ln2_g"] = ones(d)
        params[f"l{i}_ln2_b"] = zeros(d)
        params[f"l{i}_mlp_w1"] = uniform((d, cfg.mlp_dim), d)
        params[f"l{i}_mlp_b1"] = zeros(cfg.mlp_dim)
        params[f"l{i}_mlp_w2"] = uniform((cfg.mlp_dim, d), cfg.mlp_dim)
        params[f"l{i}_mlp_b2"] = zeros(d)
    params["head_w"] = uniform((d, geom.out_per_tube), d)
    params["head_b"] = zeros(geom.out_per_tube)
    return params


def parameter_count(params: dict[str, nd.Tensor]) -> int:
    return sum(t.size for t in params.values())


# -- forward pieces -----------------------------------------------------------


def normalize_running_clip(frames: np.ndarray) -> np.ndarray:
    """Map the running integer clip into [0, 1] by its current peak.

    The peak grows as folds are restored, which is how the model senses the
    iteration depth without an explicit counter input.
    """
    frames = np.asarray(frames, dtype=np.float64)
    peak = max(float(frames.max()) if frames.size else 0.0, 1.0)
    return frames / peak


def _pad_frames(frames01: np.ndarray, geom: Geometry) -> np.ndarray:
    if geom.pad_h == 0 and geom.pad_w == 0:
        return frames01
    return np.pad(
        frames01,
        ((0, 0), (0, geom.pad_h), (0, geom.pad_w), (0, 0)),
        mode="constant",
    )


def _patchify(frames01: np.ndarray, geom: Geometry) -> np.ndarray:
    """(window, H, W, C) -> (n_cells, patch*patch*C), cells in (t, u, v) order."""
    p = geom.patch
    padded = _pad_frames(frames01, geom)
    w, hh, ww, c = padded.shape
    arr = padded.reshape(w, geom.cells_h, p, geom.cells_w, p, c)
    arr = arr.transpose(0, 1, 3, 2, 4, 5)
    return arr.reshape(geom.n_cells, p * p * c)


def encode_frames(
    params: dict[str, nd.Tensor], clip, cfg: ModelConfig
) -> EmbeddingVolume:
    """Shared patch projection to a (window, cells_h, cells_w, embed_dim) volume.

    Accepts an IntClip (normalized by 2^bits_a) or an already-normalized
    float array.  Value-only: use the forward pass for gradients.
    """
    geom = geometry(cfg)
    if isinstance(clip, IntClip):
        frames01 = clip.frames.astype(np.float64) / float(1 << cfg.bits_a)
    else:
        frames01 = np.asarray(clip, dtype=np.float64)
    patches = _patchify(frames01, geom)
    cells = patches @ params["enc_w"].data + params["enc_b"].data
    return EmbeddingVolume(
        cells.reshape(geom.window, geom.cells_h, geom.cells_w, cfg.embed_dim)
    )


def _tube_cell_indices(geom: Geometry, tube: tuple[int, int, int]) -> np.ndarray:
    """Flat cell indices covered by one tube, in (t, u, v) raster order."""
    a, b, c = tube
    ts = np.arange(a * geom.tube_t, (a + 1) * geom.tube_t)
    us = np.arange(b * geom.tube_ch, (b + 1) * geom.tube_ch)
    vs = np.arange(c * geom.tube_cw, (c + 1) * geom.tube_cw)
    t_g, u_g, v_g = np.meshgrid(ts, us, vs, indexing="ij")
    return ((t_g * geom.cells_h + u_g) * geom.cells_w + v_g).reshape(-1)


def _tube_pixel_block(geom: Geometry, tube: tuple[int, int, int]) -> tuple[slice, slice, slice]:
    a, b, c = tube
    p = geom.patch
    return (
        slice(a * geom.tube_t, (a + 1) * geom.tube_t),
        slice(b * geom.tube_ch * p, (b + 1) * geom.tube_ch * p),
        slice(c * geom.tube_cw * p, (c + 1) * geom.tube_cw * p),
    )


@dataclass
class TokenSequence:
    tokens: nd.Tensor  # (n, token_dim)
    origins: list[tuple[int, int, int]]  # tube grid coordinates


@dataclass
class MaskLogits:
    logits: nd.Tensor  # (n, out_per_tube)
    origins: list[tuple[int, int, int]]


def tubes_to_tokens(
    params: dict[str, nd.Tensor],
    cells: nd.Tensor,
    frames01: np.ndarray,
    selection: SelectionResult,
    cfg: ModelConfig,
    geom: Geometry,
) -> TokenSequence:
    """Flatten each selected tube and project it to a token.

    Tube content comes from the embedding cells by default; the
    ``tubes_from_pixels`` switch rasterizes raw pixel blocks instead.
    """
    if not selection.selected_coords:
        raise InvalidArgument("token sequence requires a nonempty selection")
    if cfg.tubes_from_pixels:
        padded = _pad_frames(frames01, geom)
        rows = [
            padded[_tube_pixel_block(geom, tube)].reshape(-1)
            for tube in selection.selected_coords
        ]
        flat = nd.Tensor(np.stack(rows, axis=0))
    else:
        idx = np.concatenate(
            [_tube_cell_indices(geom, tube) for tube in selection.selected_coords]
        )
        gathered = nd.take_rows(cells, idx)
        flat = nd.reshape(
            gathered,
            (len(selection.selected_coords), geom.cells_per_tube * cfg.embed_dim),
        )
    tokens = nd.add(nd.matmul(flat, params["tube_w"]), params["tube_b"])
    return TokenSequence(tokens, list(selection.selected_coords))


def transformer_encode(
    params: dict[str, nd.Tensor], seq: TokenSequence, cfg: ModelConfig
) -> TokenSequence:
    """Pre-norm encoder stack; permutation-equivariant over tokens."""
    z = seq.tokens
    if z.shape[0] < 1:
        raise InvalidArgument("empty token sequence")
    d = cfg.token_dim
    head_dim = d // cfg.n_heads
    scale = 1.0 / math.sqrt(head_dim)
    for i in range(cfg.n_layers):
        ln = nd.layer_norm(z, params[f"l{i}_ln1_g"], params[f"l{i}_ln1_b"], cfg.ln_eps)
        q = nd.add(nd.matmul(ln, params[f"l{i}_wq"]), params[f"l{i}_bq"])
        k = nd.add(nd.matmul(ln, params[f"l{i}_wk"]), params[f"l{i}_bk"])
        v = nd.add(nd.matmul(ln, params[f"l{i}_wv"]), params[f"l{i}_bv"])
        heads = []
        for h in range(cfg.n_heads):
            cols = slice(h * head_dim, (h + 1) * head_dim)
            scores = nd.mul(nd.matmul(q[:, cols], nd.transpose(k[:, cols])), scale)
            attn = nd.softmax(scores, axis=-1)
            heads.append(nd.matmul(attn, v[:, cols]))
        merged = heads[0] if len(heads) == 1 else nd.concat(heads, axis=1)
        y = nd.add(z, nd.add(nd.matmul(merged, params[f"l{i}_wo"]), params[f"l{i}_bo"]))
        ln2 = nd.layer_norm(y, params[f"l{i}_ln2_g"], params[f"l{i}_ln2_b"], cfg.ln_eps)
        hidden = nd.gelu(nd.add(nd.matmul(ln2, params[f"l{i}_mlp_w1"]), params[f"l{i}_mlp_b1"]))
        mlp = nd.add(nd.matmul(hidden, params[f"l{i}_mlp_w2"]), params[f"l{i}_mlp_b2"])
        z = nd.add(y, mlp)
        if not np.isfinite(z.data).all():
            raise NumericalFailure(f"non-finite activations in encoder layer {i}")
    return TokenSequence(z, seq.origins)


def decode_masks(
    params: dict[str, nd.Tensor], seq: TokenSequence, cfg: ModelConfig
) -> MaskLogits:
    logits = nd.add(nd.matmul(seq.tokens, params["head_w"]), params["head_b"])
    return MaskLogits(logits, seq.origins)


def scatter_logits(
    values: np.ndarray, origins: list[tuple[int, int, int]], geom: Geometry
) -> tuple[np.ndarray, np.ndarray]:
    """Spread per-tube logits back onto the clip; returns (canvas, covered).

    ``covered`` marks exactly the selected tube pixels; everything else in the
    canvas is meaningless and must not be thresholded.
    """
    hp, wp = geom.height + geom.pad_h, geom.width + geom.pad_w
    canvas = np.zeros((geom.window, hp, wp, geom.channels))
    covered = np.zeros((geom.window, hp, wp, geom.channels), dtype=bool)
    block = (geom.tube_t, geom.tube_ch * geom.patch, geom.tube_cw * geom.patch, geom.channels)
    for row, tube in zip(values, origins):
        sl = _tube_pixel_block(geom, tube)
        canvas[sl] = row.reshape(block)
        covered[sl] = True
    return (
        canvas[:, : geom.height, : geom.width, :],
        covered[:, : geom.height, : geom.width, :],
    )


def gather_tube_targets(
    target: np.ndarray, origins: list[tuple[int, int, int]], geom: Geometry
) -> np.ndarray:
    """Extract per-tube target blocks in decode order, zero-padded like input."""
    padded = np.pad(
        np.asarray(target, dtype=np.float64),
        ((0, 0), (0, geom.pad_h), (0, geom.pad_w), (0, 0)),
        mode="constant",
    )
    return np.stack(
        [padded[_tube_pixel_block(geom, tube)].reshape(-1) for tube in origins], axis=0
    )


@dataclass
class ForwardResult:
    logits: nd.Tensor
    selection: SelectionResult
    geom: Geometry
    macs: int


def count_transformer_macs(cfg: ModelConfig, n_tokens: int) -> int:
    """Multiply-accumulate count of the token path (projection, attention,
    MLP, decode head) for one forward pass with ``n_tokens`` tokens."""
    geom = geometry(cfg)
    n, d, m = n_tokens, cfg.token_dim, cfg.mlp_dim
    per_layer = 3 * n * d * d + 2 * n * n * d + n * d * d + 2 * n * d * m
    return (
        n * _tube_feat_in(cfg, geom) * d
        + cfg.n_layers * per_layer
        + n * d * geom.out_per_tube
    )


def forward_window(
    params: dict[str, nd.Tensor],
    frames01: np.ndarray,
    cfg: ModelConfig,
    fraction: Optional[float] = None,
    threads: int = 1,
) -> ForwardResult:
    """Run the token path on one normalized window; gradients flow to params."""
    geom = geometry(cfg)
    frames01 = np.asarray(frames01, dtype=np.float64)
    if frames01.shape != (geom.window, geom.height, geom.width, geom.channels):
        raise InvalidArgument(
            f"window shape {frames01.shape} does not match the configured "
            f"{(geom.window, geom.height, geom.width, geom.channels)}"
        )
    frac = cfg.fraction if fraction is None else fraction
    patches = nd.Tensor(_patchify(frames01, geom))
    cells = nd.add(nd.matmul(patches, params["enc_w"]), params["enc_b"])
    volume = cells.data.reshape(geom.window, geom.cells_h, geom.cells_w, cfg.embed_dim)
    descriptors = volume.reshape(
        geom.grid_t, geom.tube_t, geom.grid_h, geom.tube_ch, geom.grid_w, geom.tube_cw, -1
    ).mean(axis=(1, 3, 5))
    selection = select_tokens(EmbeddingVolume(descriptors), cfg.radius, frac, threads)
    seq = tubes_to_tokens(params, cells, frames01, selection, cfg, geom)
    encoded = transformer_encode(params, seq, cfg)
    decoded = decode_masks(params, encoded, cfg)
    macs = count_transformer_macs(cfg, len(selection.selected_coords))
    return ForwardResult(decoded.logits, selection, geom, macs)


# -- stateful predictors --------------------------------------------------------


class _WindowedPredictor:
    """Shared bookkeeping: per-window order counter, previous-window masks,
    and a block-matching flow estimated once per window from the raw frames."""

    def __init__(
        self,
        flow_block: int = 8,
        flow_radius: int = 3,
        fallback_same_order: bool = True,
    ):
        self.flow_block = flow_block
        self.flow_radius = flow_radius
        self.fallback_same_order = fallback_same_order
        self._prev_masks: dict[int, np.ndarray] = {}
        self._cur_masks: dict[int, np.ndarray] = {}
        self._cur_last: Optional[int] = None
        self._order = 0
        self._flow: Optional[FlowField] = None

    def start_window(self, clip: IntClip) -> None:
        if self._cur_last is not None and clip.last_index == self._cur_last + 1:
            self._prev_masks = self._cur_masks
        elif self._cur_last is None or clip.last_index != self._cur_last:
            self._prev_masks = {}
        self._cur_masks = {}
        self._cur_last = clip.last_index
        self._order = 0
        if clip.n_frames >= 2:
            self._flow = estimate_flow(
                clip.frames[-2], clip.frames[-1], self.flow_block, self.flow_radius
            )
        else:
            self._flow = None

    def set_previous_masks(self, masks_by_order: dict[int, np.ndarray]) -> None:
        """Inject reference previous-window masks (teacher-forced evaluation)."""
        self._prev_masks = {k: np.asarray(v, dtype=np.uint8) for k, v in masks_by_order.items()}

    def _maybe_autostart(self, clip: IntClip) -> None:
        if self._cur_last != clip.last_index:
            self.start_window(clip)

    def _fallback_bits(self, clip: IntClip, order: int) -> np.ndarray:
        """Previous-window mask carried to this window: overlapping frames are
        copied straight across; the new last frame warps through the flow."""
        if self.fallback_same_order:
            prev = self._prev_masks.get(order)
        else:
            prev = self._prev_masks[max(self._prev_masks)] if self._prev_masks else None
        out = np.zeros(clip.frames.shape, dtype=np.uint8)
        if prev is None or prev.shape != out.shape:
            return out
        out[:-1] = prev[1:]
        if self._flow is not None:
            out[-1] = warp_mask(prev[-1], self._flow)
        else:
            out[-1] = prev[-1]
        return out

    def _record(self, order: int, bits: np.ndarray) -> np.ndarray:
        self._cur_masks[order] = bits
        return bits


class SSVitPredictor(_WindowedPredictor):
    """Token-selected transformer prediction on intricate tubes, flow-warped
    reuse on the rest; a full-frame binary mask either way.

    With ``bootstrap_full`` (default), a window arriving with no mask history
    (the start of a stream) routes every tube through the transformer instead
    of falling back to empty masks, so reduced fractions have a sound state
    to warp from in the windows that follow.
    """

    def __init__(
        self,
        params: dict[str, nd.Tensor],
        cfg: ModelConfig,
        fraction: Optional[float] = None,
        flow_block: int = 8,
        flow_radius: int = 3,
        fallback_same_order: bool = True,
        bootstrap_full: bool = True,
        threads: int = 1,
    ):
        super().__init__(flow_block, flow_radius, fallback_same_order)
        self.params = params
        self.cfg = cfg.validate()
        self.fraction = cfg.fraction if fraction is None else fraction
        self.bootstrap_full = bootstrap_full
        self.threads = threads
        self.mac_count = 0
        self.calls = 0

    def __call__(self, clip: IntClip) -> np.ndarray:
        self._maybe_autostart(clip)
        self._order += 1
        order = self._order
        fraction = self.fraction
        if self.bootstrap_full and not self._prev_masks:
            fraction = 1.0
        frames01 = normalize_running_clip(clip.frames)
        result = forward_window(
            self.params, frames01, self.cfg, fraction=fraction, threads=self.threads
        )
        self.mac_count += result.macs
        self.calls += 1
        canvas, covered = scatter_logits(
            result.logits.data, result.selection.selected_coords, result.geom
        )
        bits = np.where(covered, canvas >= 0.0, False)
        if not covered.all():
            fallback = self._fallback_bits(clip, order).astype(bool)
            bits = np.where(covered, bits, fallback)
        return self._record(order, bits.astype(np.uint8))


class FlowOnlyPredictor(_WindowedPredictor):
    """Pure motion reuse: every tube takes the warped previous-window mask."""

    def __call__(self, clip: IntClip) -> np.ndarray:
        self._maybe_autostart(clip)
        self._order += 1
        return self._record(self._order, self._fallback_bits(clip, self._order))


def predict_mask(
    clip: IntClip,
    params: dict[str, nd.Tensor],
    cfg: ModelConfig,
    fraction: Optional[float] = None,
    previous_masks: Optional[dict[int, np.ndarray]] = None,
    order: int = 1,
) -> BinaryFoldMask:
    """One-shot window prediction (stateless wrapper around SSVitPredictor)."""
    predictor = SSVitPredictor(params, cfg, fraction=fraction)
    predictor.start_window(clip)
    if previous_masks:
        predictor.set_previous_masks(previous_masks)
    predictor._order = order - 1
    return BinaryFoldMask(predictor(clip), order)


# -- training --------------------------------------------------------------------


@dataclass
class TrainSample:
    frames: np.ndarray  # running clip at some order, int64 (window, h, w, c)
    target: np.ndarray  # next-order mask bits, uint8
    window_end: int
    order: int


def make_window_pairs(
    truth: IntClip,
    bits_a: int,
    clip_len: int,
    include_terminal: bool = True,
) -> list[TrainSample]:
    """Teacher-forced (running clip, next mask) pairs for every window/order.

    With ``include_terminal`` each window also contributes one all-zero-target
    pair at its top order, teaching the model when to stop.
    """
    folded, counts = fold_clip(truth, bits_a)
    masks = masks_from_counts(counts)
    samples: list[TrainSample] = []
    for t in range(clip_len, truth.n_frames):
        window = slice(t - clip_len, t + 1)
        running = folded.frames[window].copy()
        top = int(counts.counts[window].max())
        limit = top + 1 if include_terminal else top
        for k in range(limit):
            if k < len(masks):
                target = masks[k].bits[window]
            else:
                target = np.zeros_like(running, dtype=np.uint8)
            samples.append(
                TrainSample(running.copy(), target.copy(), window_end=t, order=k)
            )
            running = running + (target.astype(np.int64) << bits_a)
    return samples


class Adam:
    def __init__(
        self,
        params: dict[str, nd.Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for name, tensor in self.params.items():  # fixed insertion order
            g = tensor.grad
            if g is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            tensor.data = tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train(
    samples: list[TrainSample],
    cfg: ModelConfig,
    steps: int,
    lr: float = 1e-4,
    seed: int = 0,
    params: Optional[dict[str, nd.Tensor]] = None,
) -> tuple[dict[str, nd.Tensor], list[float]]:
    """Adam on mean per-pixel BCE over the selected tubes; seeded throughout."""
    if not samples:
        raise InvalidArgument("training needs a nonempty sample list")
    for sample in samples:
        if sample.target.size and not np.isin(sample.target, (0, 1)).all():
            raise InvalidArgument("training targets must be binary")
    cfg.validate()
    if params is None:
        params = init_params(cfg)
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    losses: list[float] = []
    for step in range(steps):
        sample = samples[int(rng.integers(len(samples)))]
        frames01 = normalize_running_clip(sample.frames)
        result = forward_window(params, frames01, cfg)
        targets = gather_tube_targets(
            sample.target, result.selection.selected_coords, result.geom
        )
        loss = nd.bce_with_logits(result.logits, targets)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingFailure(
                f"loss diverged at step {step} (window {sample.window_end}, "
                f"order {sample.order})"
            )
        nd.zero_grads(params.values())
        nd.backward(loss)
        opt.step()
        losses.append(value)
    return params, losses


def smoothed_losses(losses: list[float], blocks: int) -> list[float]:
    """Block means of the loss curve, for monotone-descent checks."""
    if blocks < 1 or len(losses) < blocks:
        raise InvalidArgument("need at least one loss per block")
    edges = np.linspace(0, len(losses), blocks + 1, dtype=int)
    return [float(np.mean(losses[a:b])) for a, b in zip(edges, edges[1:])]


# -- checkpoints -------------------------------------------------------------------


_MAGIC = b"MVCK"
_CKPT_VERSION = 1


def save_params(path: Path, cfg: ModelConfig, params: dict[str, nd.Tensor]) -> None:
    """Versioned binary container: magic, config JSON, little-endian f64 arrays."""
    chunks = [_MAGIC, struct.pack("<I", _CKPT_VERSION)]
    cfg_json = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg_json)))
    chunks.append(cfg_json)
    chunks.append(struct.pack("<I", len(params)))
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", tensor.data.ndim))
        for dim in tensor.data.shape:
            chunks.append(struct.pack("<I", dim))
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: Path) -> tuple[ModelConfig, dict[str, nd.Tensor]]:
    data = Path(path).read_bytes()
    pos = 0

    def need(count: int) -> bytes:
        nonlocal pos
        if pos + count > len(data):
            raise FormatError("checkpoint truncated", offset=len(data))
        out = data[pos : pos + count]
        pos += count
        return out

    if need(4) != _MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    (version,) = struct.unpack("<I", need(4))
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (cfg_len,) = struct.unpack("<I", need(4))
    cfg = ModelConfig(**json.loads(need(cfg_len).decode("utf-8"))).validate()
    (count,) = struct.unpack("<I", need(4))
    params: dict[str, nd.Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2))
        name = need(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", need(1))
        shape = tuple(struct.unpack("<I", need(4))[0] for _ in range(ndim))
        n_values = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(need(n_values * 8), dtype="<f8").reshape(shape)
        params[name] = nd.Tensor(arr.copy(), requires_grad=True)
    return cfg, params
