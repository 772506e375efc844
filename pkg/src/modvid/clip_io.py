"""Bit-exact containers for float frames (PFM), integer frames (16-bit PGM),
and line-oriented clip manifests.

PFM: ``PF``/``Pf`` magic, one ``width height`` line, a scale line whose sign
encodes endianness (negative = little-endian), then 32-bit float rows stored
bottom-to-top.  PGM: binary ``P5`` with maxval fixed at 65535 and big-endian
16-bit samples, shared by integer frames and {0,1} masks.  Parsers never read
past the declared payload and report the byte offset of any malformation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, InvalidArgument, InvalidData, ValidationError
from .modulo_core import IntClip

MANIFEST_VERSION = 1
_REQUIRED_KEYS = ("version", "format", "width", "height", "channels", "frame_count")


# -- PFM ---------------------------------------------------------------------


def write_pfm(frame: np.ndarray) -> bytes:
    """Encode a (h, w) or (h, w, 3) float frame; always little-endian."""
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim == 3 and frame.shape[2] == 1:
        frame = frame[:, :, 0]
    if frame.ndim == 2:
        magic = "Pf"
    elif frame.ndim == 3 and frame.shape[2] == 3:
        magic = "PF"
    else:
        raise InvalidArgument(
            f"PFM stores gray or 3-channel frames, got shape {frame.shape}"
        )
    if not np.isfinite(frame).all():
        raise InvalidData("PFM requires finite values")
    h, w = frame.shape[:2]
    header = f"{magic}\n{w} {h}\n-1.0\n".encode("ascii")
    payload = np.flipud(frame).astype("<f4").tobytes()
    return header + payload


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n and data[pos : pos + 1].isspace():
        pos += 1
    if pos >= n:
        raise FormatError("unexpected end of PFM header", offset=pos)
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def read_pfm(data: bytes, expect_channels: Optional[int] = None) -> np.ndarray:
    """Decode PFM bytes to float32 (h, w) or (h, w, 3)."""
    magic, pos = _next_token(data, 0)
    if magic == b"PF":
        channels = 3
    elif magic == b"Pf":
        channels = 1
    else:
        raise FormatError(f"bad PFM magic {magic!r}", offset=0)
    wtok, pos = _next_token(data, pos)
    htok, pos = _next_token(data, pos)
    stok, pos = _next_token(data, pos)
    try:
        w, h = int(wtok), int(htok)
        scale = float(stok)
    except ValueError as exc:
        raise FormatError(f"bad PFM dimensions/scale: {exc}", offset=pos) from exc
    if w < 1 or h < 1:
        raise FormatError(f"bad PFM dimensions {w}x{h}", offset=pos)
    if scale == 0.0:
        raise FormatError("PFM scale must be nonzero", offset=pos)
    if expect_channels is not None and channels != expect_channels:
        raise FormatError(
            f"PFM holds {channels} channel(s), consumer expects {expect_channels}",
            offset=0,
        )
    pos += 1  # single whitespace byte separating header from payload
    need = w * h * channels * 4
    if len(data) - pos < need:
        raise FormatError(
            f"PFM payload truncated: need {need} bytes, have {len(data) - pos}",
            offset=len(data),
        )
    dtype = "<f4" if scale < 0 else ">f4"
    flat = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=pos)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(flat.reshape(shape)).astype(np.float32)


# -- 16-bit PGM ----------------------------------------------------------------


def write_pgm16(frame: np.ndarray) -> bytes:
    """Encode a (h, w) integer frame as binary P5 with maxval 65535."""
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise InvalidArgument(f"PGM stores single-channel frames, got {frame.shape}")
    if not np.issubdtype(frame.dtype, np.integer):
        raise InvalidData("PGM samples must be integers")
    if frame.size:
        lo, hi = int(frame.min()), int(frame.max())
        if lo < 0:
            raise InvalidData(f"negative sample {lo} cannot be stored")
        if hi > 65535:
            raise InvalidData(f"sample {hi} exceeds maxval 65535")
    h, w = frame.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    return header + frame.astype(">u2").tobytes()


def _next_pgm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        byte = data[pos : pos + 1]
        if byte == b"#":  # comment to end of line
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif byte.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise FormatError("unexpected end of PGM header", offset=pos)
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def read_pgm16(data: bytes) -> np.ndarray:
    """Decode binary P5 bytes to an int64 (h, w) array."""
    magic, pos = _next_pgm_token(data, 0)
    if magic != b"P5":
        raise FormatError(f"bad PGM magic {magic!r}", offset=0)
    wtok, pos = _next_pgm_token(data, pos)
    htok, pos = _next_pgm_token(data, pos)
    mtok, pos = _next_pgm_token(data, pos)
    try:
        w, h, maxval = int(wtok), int(htok), int(mtok)
    except ValueError as exc:
        raise FormatError(f"bad PGM header: {exc}", offset=pos) from exc
    if w < 1 or h < 1:
        raise FormatError(f"bad PGM dimensions {w}x{h}", offset=pos)
    if not (256 <= maxval <= 65535):
        raise FormatError(f"expected a 2-byte maxval, got {maxval}", offset=pos)
    pos += 1  # single whitespace byte after maxval
    need = w * h * 2
    if len(data) - pos < need:
        raise FormatError(
            f"PGM payload truncated: need {need} bytes, have {len(data) - pos}",
            offset=len(data),
        )
    flat = np.frombuffer(data, dtype=">u2", count=w * h, offset=pos)
    return flat.reshape(h, w).astype(np.int64)


# -- manifests ------------------------------------------------------------------


@dataclass
class ClipManifest:
    """Header + ordered frame-file list describing one stored clip."""

    fmt: str  # "pgm16" or "pfm"
    width: int
    height: int
    channels: int
    frame_count: int
    files: list[str]
    bit_depth: Optional[int] = None
    bits_a: Optional[int] = None
    bits_b: Optional[int] = None
    extra: dict[str, str] = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def files_per_frame(self) -> int:
        if self.fmt == "pfm":
            if self.channels in (1, 3):
                return 1
            raise ValidationError(f"pfm streams support 1 or 3 channels, not {self.channels}")
        return self.channels

    def check(self) -> "ClipManifest":
        if self.fmt not in ("pgm16", "pfm"):
            raise ValidationError(f"unknown format {self.fmt!r}")
        if min(self.width, self.height, self.channels) < 1 or self.frame_count < 1:
            raise ValidationError("dimensions and frame count must be positive")
        if self.bits_a is not None and self.bits_b is not None and self.bits_a >= self.bits_b:
            raise ValidationError(
                f"folded depth bits_a={self.bits_a} must be below bits_b={self.bits_b}"
            )
        expect = self.frame_count * self.files_per_frame()
        if len(self.files) != expect:
            raise ValidationError(
                f"manifest lists {len(self.files)} files, expected {expect}"
            )
        return self


def write_manifest(manifest: ClipManifest) -> str:
    manifest.check()
    lines = [
        f"version: {manifest.version}",
        f"format: {manifest.fmt}",
        f"width: {manifest.width}",
        f"height: {manifest.height}",
        f"channels: {manifest.channels}",
        f"frame_count: {manifest.frame_count}",
    ]
    if manifest.bit_depth is not None:
        lines.append(f"bit_depth: {manifest.bit_depth}")
    if manifest.bits_a is not None:
        lines.append(f"bits_a: {manifest.bits_a}")
    if manifest.bits_b is not None:
        lines.append(f"bits_b: {manifest.bits_b}")
    for key, value in manifest.extra.items():
        lines.append(f"{key}: {value}")
    lines.append("frames:")
    lines.extend(manifest.files)
    return "\n".join(lines) + "\n"


def read_manifest(text: str) -> ClipManifest:
    keys: dict[str, str] = {}
    files: list[str] = []
    in_files = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if in_files:
            files.append(line)
            continue
        if line == "frames:":
            in_files = True
            continue
        if ":" not in line:
            raise FormatError(f"manifest line {lineno} is not 'key: value': {raw!r}")
        key, value = line.split(":", 1)
        keys[key.strip()] = value.strip()
    missing = [k for k in _REQUIRED_KEYS if k not in keys]
    if missing:
        raise ValidationError(f"manifest missing required key(s): {', '.join(missing)}")
    try:
        manifest = ClipManifest(
            fmt=keys.pop("format"),
            width=int(keys.pop("width")),
            height=int(keys.pop("height")),
            channels=int(keys.pop("channels")),
            frame_count=int(keys.pop("frame_count")),
            files=files,
            bit_depth=int(keys.pop("bit_depth")) if "bit_depth" in keys else None,
            bits_a=int(keys.pop("bits_a")) if "bits_a" in keys else None,
            bits_b=int(keys.pop("bits_b")) if "bits_b" in keys else None,
            version=int(keys.pop("version")),
        )
    except ValueError as exc:
        raise ValidationError(f"bad manifest value: {exc}") from exc
    manifest.extra = keys  # unknown keys preserved in order
    return manifest.check()


def validate_manifest(manifest: ClipManifest, base_dir: Path) -> None:
    """Check every referenced file exists and matches the declared geometry."""
    manifest.check()
    base = Path(base_dir)
    for name in manifest.files:
        path = base / name
        if not path.exists():
            raise ValidationError(f"manifest references missing file: {name}")
        data = path.read_bytes()
        if manifest.fmt == "pgm16":
            frame = read_pgm16(data)
            shape = frame.shape
        else:
            frame = read_pfm(data)
            shape = frame.shape[:2]
        if shape != (manifest.height, manifest.width):
            raise ValidationError(
                f"{name}: frame is {shape[1]}x{shape[0]}, manifest says "
                f"{manifest.width}x{manifest.height}"
            )


# -- whole-clip helpers -----------------------------------------------------------


def write_int_clip(
    out_dir: Path,
    stem: str,
    clip: IntClip,
    bits_a: Optional[int] = None,
    bits_b: Optional[int] = None,
    extra: Optional[dict[str, str]] = None,
) -> Path:
    """Store an integer clip as PGM16 frames plus a manifest; returns the
    manifest path.  Multi-channel clips store one file per channel."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n, h, w, c = clip.frames.shape
    files: list[str] = []
    for i in range(n):
        if c == 1:
            name = f"{stem}_{i:04d}.pgm"
            (out_dir / name).write_bytes(write_pgm16(clip.frames[i, :, :, 0]))
            files.append(name)
        else:
            for ch in range(c):
                name = f"{stem}_{i:04d}_c{ch}.pgm"
                (out_dir / name).write_bytes(write_pgm16(clip.frames[i, :, :, ch]))
                files.append(name)
    manifest = ClipManifest(
        fmt="pgm16",
        width=w,
        height=h,
        channels=c,
        frame_count=n,
        files=files,
        bit_depth=clip.bit_depth,
        bits_a=bits_a,
        bits_b=bits_b,
        extra=dict(extra or {}),
    )
    path = out_dir / f"{stem}.manifest"
    path.write_text(write_manifest(manifest))
    return path


def read_int_clip(manifest_path: Path) -> IntClip:
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path.read_text())
    if manifest.fmt != "pgm16":
        raise ValidationError(f"{manifest_path.name}: expected a pgm16 stream")
    if manifest.bit_depth is None:
        raise ValidationError(f"{manifest_path.name}: integer stream needs bit_depth")
    base = manifest_path.parent
    n, c = manifest.frame_count, manifest.channels
    frames = np.zeros((n, manifest.height, manifest.width, c), dtype=np.int64)
    for i in range(n):
        for ch in range(c):
            name = manifest.files[i * c + ch]
            path = base / name
            if not path.exists():
                raise ValidationError(f"manifest references missing file: {name}")
            frame = read_pgm16(path.read_bytes())
            if frame.shape != (manifest.height, manifest.width):
                raise ValidationError(
                    f"{name}: dimensions do not match the manifest"
                )
            frames[i, :, :, ch] = frame
    return IntClip(frames, manifest.bit_depth).validate()


def write_float_clip(
    out_dir: Path,
    stem: str,
    frames: np.ndarray,
    extra: Optional[dict[str, str]] = None,
) -> Path:
    """Store a float clip (n, h, w, c) as PFM frames plus a manifest."""
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise InvalidArgument("expected (n, h, w, c) float frames")
    n, h, w, c = frames.shape
    if c not in (1, 3):
        raise InvalidArgument("PFM streams support 1 or 3 channels")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(n):
        name = f"{stem}_{i:04d}.pfm"
        frame = frames[i, :, :, 0] if c == 1 else frames[i]
        (out_dir / name).write_bytes(write_pfm(frame))
        files.append(name)
    manifest = ClipManifest(
        fmt="pfm",
        width=w,
        height=h,
        channels=c,
        frame_count=n,
        files=files,
        extra=dict(extra or {}),
    )
    path = out_dir / f"{stem}.manifest"
    path.write_text(write_manifest(manifest))
    return path


def read_float_clip(manifest_path: Path) -> np.ndarray:
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path.read_text())
    if manifest.fmt != "pfm":
        raise ValidationError(f"{manifest_path.name}: expected a pfm stream")
    base = manifest_path.parent
    n, c = manifest.frame_count, manifest.channels
    out = np.zeros((n, manifest.height, manifest.width, c), dtype=np.float64)
    for i, name in enumerate(manifest.files):
        path = base / name
        if not path.exists():
            raise ValidationError(f"manifest references missing file: {name}")
        frame = read_pfm(path.read_bytes(), expect_channels=c if c == 3 else 1)
        if frame.shape[:2] != (manifest.height, manifest.width):
            raise ValidationError(f"{name}: dimensions do not match the manifest")
        out[i] = frame[:, :, None] if frame.ndim == 2 else frame
    return out
