"""Figure rendering for CLI reports.

Uses the Agg backend with pinned metadata so repeated runs emit byte-identical
PNG files next to the delimited text outputs.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .imaging import QualityReport  # noqa: E402

_SAVE_KW = dict(dpi=110, metadata={"Software": "modvid"})


def save_metric_curves(report: QualityReport, path: Path) -> None:
    """Per-frame PSNR and SSIM curves; infinite PSNR rows are annotated."""
    frames = np.arange(len(report.psnr))
    finite = [p if math.isfinite(p) else np.nan for p in report.psnr]
    fig, (ax_psnr, ax_ssim) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    ax_psnr.plot(frames, finite, marker="o", ms=3, color="tab:blue")
    ax_psnr.set_ylabel("PSNR (dB)")
    n_inf = sum(1 for p in report.psnr if math.isinf(p))
    title = "Reconstruction quality per frame"
    if n_inf:
        title += f" ({n_inf} exact frame{'s' if n_inf != 1 else ''} off-scale)"
    ax_psnr.set_title(title)
    ax_ssim.plot(frames, report.ssim, marker="o", ms=3, color="tab:orange")
    ax_ssim.set_ylabel("SSIM")
    ax_ssim.set_xlabel("frame")
    ax_ssim.set_ylim(-1.05, 1.05)
    for ax in (ax_psnr, ax_ssim):
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_heatmap(scores: np.ndarray, path: Path, title: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(scores, cmap="magma", interpolation="nearest")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_loss_curve(losses: list[float], path: Path, smooth_window: int = 101) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = np.arange(len(losses))
    ax.plot(steps, losses, alpha=0.3, lw=0.7, color="tab:gray", label="per step")
    if len(losses) >= smooth_window:
        kernel = np.ones(smooth_window) / smooth_window
        smoothed = np.convolve(losses, kernel, mode="valid")
        offset = (smooth_window - 1) // 2
        ax.plot(steps[offset : offset + len(smoothed)], smoothed,
                color="tab:red", lw=1.5, label=f"mean over {smooth_window}")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_frame_montage(frames: np.ndarray, path: Path, title: str) -> None:
    """First / middle / last frame of an 8-bit clip side by side."""
    frames = np.asarray(frames)
    picks = sorted({0, frames.shape[0] // 2, frames.shape[0] - 1})
    fig, axes = plt.subplots(1, len(picks), figsize=(3 * len(picks), 3.2))
    if len(picks) == 1:
        axes = [axes]
    for ax, idx in zip(axes, picks):
        img = frames[idx]
        if img.ndim == 3 and img.shape[2] == 1:
            img = img[:, :, 0]
        ax.imshow(img, cmap="gray", vmin=0, vmax=255)
        ax.set_title(f"frame {idx}")
        ax.axis("off")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
