"""Seeded synthetic HDR video and the folded-training-tuple pipeline.

Scenes are sums of drifting Gaussian blobs over a linear brightness ramp,
normalized per video to a declared radiance range, so the peak fold count
after quantization is controlled directly by ``brightness_max``.  Identical
specs produce bit-identical clips.  From a quantized ground-truth clip the
tuple builder derives the folded clip, wrap counts, per-order masks and the
saturating LDR rendition, all exactly consistent with the folding model.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import clip_io
from .errors import DegenerateInput, InvalidArgument, ValidationError
from .modulo_core import BinaryFoldMask, FoldCountMap, IntClip, fold_clip, masks_from_counts
from .parallel import ordered_map


@dataclass
class SceneSpec:
    width: int = 32
    height: int = 32
    n_frames: int = 24
    channels: int = 1
    n_blobs: int = 3
    blob_sigma_min: float = 0.12  # fraction of min(height, width)
    blob_sigma_max: float = 0.30
    ramp_angle_deg: float = 30.0
    ramp_gain: float = 0.25
    brightness_min: float = 0.0
    brightness_max: float = 896.0  # 3.5 * 2^8: folds up to 3 times at 8 bits
    max_speed: float = 1.2
    seed: int = 0

    def validate(self) -> "SceneSpec":
        if min(self.width, self.height, self.n_frames, self.channels) < 1:
            raise InvalidArgument("scene dimensions must be positive")
        if self.n_blobs < 0 or self.max_speed < 0 or self.ramp_gain < 0:
            raise InvalidArgument("scene parameters must be non-negative")
        if not (0.0 < self.blob_sigma_min <= self.blob_sigma_max):
            raise InvalidArgument("blob sigma range must satisfy 0 < min <= max")
        if self.brightness_max < self.brightness_min or self.brightness_min < 0:
            raise InvalidArgument("brightness range must satisfy 0 <= min <= max")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SceneSpec":
        return SceneSpec(**json.loads(text)).validate()


@dataclass
class DatasetTuple:
    """One clip's worth of aligned training data."""

    modulo: IntClip
    truth: IntClip
    counts: FoldCountMap
    masks: list[BinaryFoldMask]
    ldr: IntClip


def _reflect(positions: np.ndarray, limit: float) -> np.ndarray:
    """Fold coordinates into [0, limit] with mirror reflections at the walls."""
    period = 2.0 * limit
    wrapped = np.mod(positions, period)
    return np.where(wrapped > limit, period - wrapped, wrapped)


def render_scene(spec: SceneSpec, threads: int = 1) -> np.ndarray:
    """Render the radiance field, shape (n_frames, height, width, channels)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    centers = rng.uniform([0, 0], [h - 1, w - 1], size=(spec.n_blobs, 2))
    velocity = rng.uniform(-spec.max_speed, spec.max_speed, size=(spec.n_blobs, 2))
    sigmas = rng.uniform(spec.blob_sigma_min, spec.blob_sigma_max, size=spec.n_blobs) * min(h, w)
    amps = rng.uniform(0.55, 1.0, size=spec.n_blobs)
    chan_gain = np.concatenate(
        [[1.0], rng.uniform(0.8, 1.0, size=spec.channels - 1)]
    )
    theta = math.radians(spec.ramp_angle_deg)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    proj = yy * math.cos(theta) + xx * math.sin(theta)
    span = proj.max() - proj.min()
    ramp = (proj - proj.min()) / span if span > 0 else np.zeros_like(proj)

    def frame_at(t: int) -> np.ndarray:
        base = spec.ramp_gain * ramp
        acc = base.copy()
        if spec.n_blobs:
            pos = _reflect(centers + velocity * t, np.array([h - 1, w - 1], dtype=float))
            for b in range(spec.n_blobs):
                d2 = (yy - pos[b, 0]) ** 2 + (xx - pos[b, 1]) ** 2
                acc = acc + amps[b] * np.exp(-d2 / (2.0 * sigmas[b] ** 2))
        return acc

    fields = np.stack(ordered_map(frame_at, list(range(spec.n_frames)), threads))
    clip = fields[..., None] * chan_gain  # (n, h, w, c)
    lo, hi = clip.min(), clip.max()
    if hi > lo:
        clip = spec.brightness_min + (spec.brightness_max - spec.brightness_min) * (
            (clip - lo) / (hi - lo)
        )
    else:
        clip = np.full_like(clip, spec.brightness_min)
    return clip


def exposure_scale(values: np.ndarray, target_over_rate: float, bits_a: int) -> float:
    """Global scale making the saturated fraction match the target.

    Saturation means a scaled sample reaching 2^bits_a.  Hits the target to
    within one order statistic (1/N).  A zero target leaves an unsaturated
    clip untouched and otherwise scales the maximum just below threshold.
    """
    if not (0.0 <= target_over_rate < 1.0):
        raise InvalidArgument(f"over-exposure rate must be in [0, 1), got {target_over_rate}")
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise InvalidArgument("empty clip")
    threshold = float(1 << bits_a)
    n = flat.size
    k = round(target_over_rate * n)
    vmax = float(flat.max())
    if k == 0:
        if vmax < threshold:
            return 1.0
        if vmax <= 0:
            return 1.0
        return threshold * (1.0 - 1e-9) / vmax
    kth_largest = float(np.partition(flat, n - k)[n - k])
    if kth_largest <= 0.0:
        raise DegenerateInput(
            "cannot reach a nonzero over-exposure rate on a non-positive clip"
        )
    return threshold / kth_largest


def re_expose(hdr: np.ndarray, target_over_rate: float, bits_a: int) -> np.ndarray:
    """Apply one global exposure scale to the whole video."""
    hdr = np.asarray(hdr, dtype=np.float64)
    return hdr * exposure_scale(hdr, target_over_rate, bits_a)


def quantize(hdr: np.ndarray, bits: int) -> IntClip:
    """Floor to integers and clamp into the bits-wide range."""
    hdr = np.asarray(hdr, dtype=np.float64)
    if hdr.size and hdr.min() < 0:
        raise InvalidArgument("radiance must be >= 0 before quantization")
    top = (1 << bits) - 1
    frames = np.clip(np.floor(hdr), 0, top).astype(np.int64)
    return IntClip(frames, bits)


def make_tuple(truth: IntClip, bits_a: int) -> DatasetTuple:
    """Derive the folded clip, counts, per-order masks and LDR clip."""
    modulo, counts = fold_clip(truth, bits_a)
    masks = masks_from_counts(counts)
    ldr = IntClip(np.minimum(truth.frames, (1 << bits_a) - 1), bits_a)
    return DatasetTuple(modulo=modulo, truth=truth, counts=counts, masks=masks, ldr=ldr)


# -- dataset directories -----------------------------------------------------


@dataclass
class DatasetBundle:
    spec: SceneSpec
    bits_a: int
    bits_b: int
    hdr: np.ndarray
    data: DatasetTuple
    meta: dict[str, str] = field(default_factory=dict)


def write_dataset(
    out_dir: Path,
    spec: SceneSpec,
    bits_a: int,
    bits_b: int,
    over_rate: float = 0.25,
    threads: int = 1,
) -> Path:
    """Render, expose, quantize and store a full dataset directory.

    Layout: one manifest per stream (hdr, gt, mod, ldr, counts, mask_k*),
    plus ``dataset.manifest`` listing the member manifests, plus the scene
    spec as JSON.  Returns the dataset manifest path.
    """
    if bits_a >= bits_b:
        raise InvalidArgument(f"bits_a={bits_a} must be below bits_b={bits_b}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hdr = render_scene(spec, threads=threads)
    exposed = re_expose(hdr, over_rate, bits_a)
    truth = quantize(exposed, bits_b)
    tup = make_tuple(truth, bits_a)

    (out_dir / "scene.json").write_text(spec.to_json() + "\n")
    members: list[str] = []
    members.append(clip_io.write_float_clip(out_dir, "hdr", exposed).name)
    members.append(
        clip_io.write_int_clip(out_dir, "gt", tup.truth, bits_a=bits_a, bits_b=bits_b).name
    )
    members.append(
        clip_io.write_int_clip(out_dir, "mod", tup.modulo, bits_a=bits_a, bits_b=bits_b).name
    )
    members.append(
        clip_io.write_int_clip(out_dir, "ldr", tup.ldr, bits_a=bits_a, bits_b=bits_b).name
    )
    counts_clip = IntClip(tup.counts.counts, max(1, bits_b - bits_a))
    members.append(clip_io.write_int_clip(out_dir, "counts", counts_clip).name)
    for mask in tup.masks:
        mask_clip = IntClip(mask.bits.astype(np.int64), 1)
        members.append(
            clip_io.write_int_clip(out_dir, f"mask_k{mask.order}", mask_clip).name
        )
    # The index reuses the manifest container; its "frames" are the member
    # manifests, so the structural fields describe that list while the scene
    # geometry rides along as extra keys.
    manifest = clip_io.ClipManifest(
        fmt="pgm16",
        width=spec.width,
        height=spec.height,
        channels=1,
        frame_count=len(members),
        files=members,
        bits_a=bits_a,
        bits_b=bits_b,
        extra={
            "kind": "dataset",
            "scene_frames": str(spec.n_frames),
            "scene_channels": str(spec.channels),
            "seed": str(spec.seed),
            "over_rate": repr(over_rate),
            "max_order": str(len(tup.masks)),
        },
    )
    path = out_dir / "dataset.manifest"
    path.write_text(clip_io.write_manifest(manifest))
    return path


def load_dataset(dataset_dir: Path) -> DatasetBundle:
    """Read a dataset directory back into memory and cross-check it."""
    dataset_dir = Path(dataset_dir)
    manifest_path = dataset_dir / "dataset.manifest"
    if not manifest_path.exists():
        raise ValidationError(f"no dataset.manifest under {dataset_dir}")
    manifest = clip_io.read_manifest(manifest_path.read_text())
    if manifest.extra.get("kind") != "dataset":
        raise ValidationError("manifest is not a dataset index")
    if manifest.bits_a is None or manifest.bits_b is None:
        raise ValidationError("dataset manifest must declare bits_a and bits_b")
    for member in manifest.files:
        if not (dataset_dir / member).exists():
            raise ValidationError(f"manifest references missing file: {member}")
    spec = SceneSpec.from_json((dataset_dir / "scene.json").read_text())
    hdr = clip_io.read_float_clip(dataset_dir / "hdr.manifest")
    truth = clip_io.read_int_clip(dataset_dir / "gt.manifest")
    modulo = clip_io.read_int_clip(dataset_dir / "mod.manifest")
    ldr = clip_io.read_int_clip(dataset_dir / "ldr.manifest")
    counts = FoldCountMap(clip_io.read_int_clip(dataset_dir / "counts.manifest").frames)
    max_order = int(manifest.extra.get("max_order", "0"))
    masks = []
    for k in range(1, max_order + 1):
        bits = clip_io.read_int_clip(dataset_dir / f"mask_k{k}.manifest").frames
        masks.append(BinaryFoldMask(bits.astype(np.uint8), order=k))
    bundle = DatasetBundle(
        spec=spec,
        bits_a=manifest.bits_a,
        bits_b=manifest.bits_b,
        hdr=hdr,
        data=DatasetTuple(modulo=modulo, truth=truth, counts=counts, masks=masks, ldr=ldr),
        meta=dict(manifest.extra),
    )
    verify_dataset(bundle)
    return bundle


def verify_dataset(bundle: DatasetBundle) -> None:
    """Re-fold the stored truth and require exact agreement with the tuple."""
    refolded, counts = fold_clip(bundle.data.truth, bundle.bits_a)
    if not np.array_equal(refolded.frames, bundle.data.modulo.frames):
        raise ValidationError("stored modulo clip disagrees with re-folded truth")
    if not np.array_equal(counts.counts, bundle.data.counts.counts):
        raise ValidationError("stored fold counts disagree with re-folded truth")
    total = np.zeros_like(counts.counts)
    for mask in bundle.data.masks:
        total += mask.bits
    if not np.array_equal(total, counts.counts):
        raise ValidationError("stored masks do not sum to the fold counts")
    ldr_expect = np.minimum(bundle.data.truth.frames, (1 << bundle.bits_a) - 1)
    if not np.array_equal(ldr_expect, bundle.data.ldr.frames):
        raise ValidationError("stored LDR clip disagrees with the saturation rule")
