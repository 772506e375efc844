"""Reconstruction quality metrics and display tone mapping.

PSNR and SSIM are evaluated over an interior region (a configurable border
is excluded), with SSIM defaulting to single-window global statistics; an
11x11 Gaussian-windowed variant is available for comparison with external
tools.  Identical frames report PSNR as ``math.inf`` -- a sentinel value,
never the result of an overflowing division.

Video tone mapping smooths per-frame brightness toward the previous
displayed frame before applying a global-mean Reinhard curve, which removes
the frame-to-frame flicker a per-frame operator produces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidArgument
from .parallel import ordered_map

DEFAULT_EXCLUDE = 4
DEFAULT_SMOOTHING = 0.9


@dataclass
class QualityReport:
    psnr: list[float]
    ssim: list[float]
    exclude: int
    psnr_mean: float = field(init=False)
    ssim_mean: float = field(init=False)

    def __post_init__(self):
        self.psnr_mean = float(np.mean(self.psnr)) if self.psnr else math.nan
        self.ssim_mean = float(np.mean(self.ssim)) if self.ssim else math.nan


def _interior(frame: np.ndarray, exclude: int) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        frame = frame[:, :, None]
    if frame.ndim != 3:
        raise InvalidArgument("frames must be 2-D or (h, w, c)")
    h, w = frame.shape[:2]
    if exclude < 0 or 2 * exclude >= min(h, w):
        raise InvalidArgument(
            f"exclusion width {exclude} leaves no interior in a {h}x{w} frame"
        )
    if exclude == 0:
        return frame
    return frame[exclude:-exclude, exclude:-exclude]


def psnr(gt: np.ndarray, est: np.ndarray, exclude: int = DEFAULT_EXCLUDE) -> float:
    """20*log10(max(gt)/sqrt(MSE)) over the interior; inf when frames match."""
    gt = np.asarray(gt)
    est = np.asarray(est)
    if gt.shape != est.shape:
        raise InvalidArgument(f"frame shapes differ: {gt.shape} vs {est.shape}")
    g = _interior(gt, exclude)
    e = _interior(est, exclude)
    mse = float(np.mean((g - e) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(g.max())
    return 20.0 * math.log10(peak / math.sqrt(mse))


def ssim(
    gt: np.ndarray,
    est: np.ndarray,
    exclude: int = DEFAULT_EXCLUDE,
    windowed: bool = False,
) -> float:
    """Structural similarity over the interior region.

    Default mode evaluates the single-window formula on global interior
    statistics; ``windowed`` switches to the common 11x11 Gaussian
    (sigma 1.5) local map averaged over the interior.
    """
    gt = np.asarray(gt)
    est = np.asarray(est)
    if gt.shape != est.shape:
        raise InvalidArgument(f"frame shapes differ: {gt.shape} vs {est.shape}")
    g = _interior(gt, exclude)
    e = _interior(est, exclude)
    peak = float(g.max())
    d = peak if peak > 0 else 1.0
    c1 = (0.01 * d) ** 2
    c2 = (0.03 * d) ** 2
    if not windowed:
        mu_g = float(g.mean())
        mu_e = float(e.mean())
        var_g = float(g.var())
        var_e = float(e.var())
        cov = float(((g - mu_g) * (e - mu_e)).mean())
        num = (2.0 * mu_g * mu_e + c1) * (2.0 * cov + c2)
        den = (mu_g * mu_g + mu_e * mu_e + c1) * (var_g + var_e + c2)
        return num / den
    sigma = 1.5
    truncate = (11 - 1) / 2 / sigma  # 11x11 kernel

    def blur(x: np.ndarray) -> np.ndarray:
        return gaussian_filter(x, sigma=(sigma, sigma, 0), truncate=truncate, mode="nearest")

    mu_g = blur(g)
    mu_e = blur(e)
    var_g = blur(g * g) - mu_g * mu_g
    var_e = blur(e * e) - mu_e * mu_e
    cov = blur(g * e) - mu_g * mu_e
    num = (2.0 * mu_g * mu_e + c1) * (2.0 * cov + c2)
    den = (mu_g * mu_g + mu_e * mu_e + c1) * (var_g + var_e + c2)
    return float(np.mean(num / den))


def evaluate_clip(
    gt_frames: np.ndarray,
    est_frames: np.ndarray,
    exclude: int = DEFAULT_EXCLUDE,
    windowed: bool = False,
    threads: int = 1,
) -> QualityReport:
    """Per-frame PSNR/SSIM over two aligned (n, h, w, c) stacks."""
    gt_frames = np.asarray(gt_frames)
    est_frames = np.asarray(est_frames)
    if gt_frames.shape != est_frames.shape:
        raise InvalidArgument(
            f"clip shapes differ: {gt_frames.shape} vs {est_frames.shape}"
        )

    def one(i: int) -> tuple[float, float]:
        return (
            psnr(gt_frames[i], est_frames[i], exclude),
            ssim(gt_frames[i], est_frames[i], exclude, windowed),
        )

    pairs = ordered_map(one, list(range(gt_frames.shape[0])), threads)
    return QualityReport([p for p, _ in pairs], [s for _, s in pairs], exclude)


def _luminance(frames: np.ndarray) -> np.ndarray:
    return frames.mean(axis=-1)


def tonemap_video(hdr: np.ndarray, alpha: float = DEFAULT_SMOOTHING) -> np.ndarray:
    """Temporally smoothed global Reinhard mapping to an 8-bit clip.

    Per frame, the mean luminance is blended toward the previous displayed
    frame's mean (weight ``alpha``) and the frame rescaled accordingly; each
    pixel then maps through v / (v + global_mean) and is scaled to [0, 255].
    An all-zero video maps to all zeros.
    """
    hdr = np.asarray(hdr, dtype=np.float64)
    if hdr.ndim != 4:
        raise InvalidArgument("expected (n, h, w, c) video")
    if hdr.size and hdr.min() < 0:
        raise InvalidArgument("radiance values must be >= 0")
    if not (0.0 <= alpha < 1.0):
        raise InvalidArgument(f"smoothing weight must be in [0, 1), got {alpha}")
    lum = _luminance(hdr)
    global_mean = float(lum.mean())
    out = np.zeros(hdr.shape, dtype=np.uint8)
    if global_mean == 0.0:
        return out
    smoothed = None
    for t in range(hdr.shape[0]):
        m = float(lum[t].mean())
        smoothed = m if smoothed is None else alpha * smoothed + (1.0 - alpha) * m
        scale = smoothed / m if m > 0 else 1.0
        v = hdr[t] * scale
        mapped = v / (v + global_mean)
        out[t] = np.clip(np.rint(mapped * 255.0), 0, 255).astype(np.uint8)
    return out


def tonemap_video_independent(hdr: np.ndarray) -> np.ndarray:
    """Per-frame Reinhard baseline: each frame normalized by its own mean.

    Exists to quantify the flicker the smoothed pipeline removes.
    """
    hdr = np.asarray(hdr, dtype=np.float64)
    if hdr.ndim != 4:
        raise InvalidArgument("expected (n, h, w, c) video")
    out = np.zeros(hdr.shape, dtype=np.uint8)
    lum = _luminance(hdr)
    for t in range(hdr.shape[0]):
        m = float(lum[t].mean())
        if m == 0.0:
            continue
        mapped = hdr[t] / (hdr[t] + m)
        out[t] = np.clip(np.rint(mapped * 255.0), 0, 255).astype(np.uint8)
    return out
