"""Command-line front door.

Subcommands: fold, synth, train, infer, eval, tonemap, select.  Every run
writes a ``run_manifest.txt`` into its output directory echoing the full
configuration (thread count included) so any result can be reproduced
bit-exactly.  Exit codes: 0 success, 2 validation/parse failure, 3 I/O
failure, 4 numerical failure, 1 unexpected error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, clip_io, datagen, imaging, report
from .errors import (
    DegenerateInput,
    FormatError,
    InvalidArgument,
    InvalidData,
    ModvidError,
    NumericalFailure,
    PredictorContractError,
    ValidationError,
)
from .modulo_core import IntClip, OraclePredictor, fold_clip, sliding_window_reconstruct
from .sst_predictor import (
    FlowOnlyPredictor,
    ModelConfig,
    SSVitPredictor,
    load_params,
    make_window_pairs,
    save_params,
    train as train_model,
)
from .token_select import EmbeddingVolume, score_volume, select_tokens

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_VALIDATION_ERRORS = (
    InvalidArgument,
    InvalidData,
    DegenerateInput,
    ValidationError,
    FormatError,
    PredictorContractError,
)


def _write_run_manifest(out_dir: Path, subcommand: str, args: argparse.Namespace) -> None:
    lines = [f"subcommand: {subcommand}", f"version: {__version__}"]
    for key in sorted(vars(args)):
        if key in ("func", "subcommand"):
            continue
        lines.append(f"{key}: {getattr(args, key)}")
    (out_dir / "run_manifest.txt").write_text("\n".join(lines) + "\n")


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt_metric(value: float) -> str:
    if math.isinf(value):
        return "inf"
    return f"{value:.6f}"


# -- subcommands ---------------------------------------------------------------


def cmd_fold(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    clip = clip_io.read_int_clip(Path(args.input))
    folded, counts = fold_clip(clip, args.bits_a)
    clip_io.write_int_clip(
        out, "mod", folded, bits_a=args.bits_a, bits_b=clip.bit_depth,
        extra={"source": str(args.input)},
    )
    counts_clip = IntClip(counts.counts, max(1, clip.bit_depth - args.bits_a))
    clip_io.write_int_clip(out, "counts", counts_clip, extra={"source": str(args.input)})
    _write_run_manifest(out, "fold", args)
    print(f"folded {clip.n_frames} frames to {args.bits_a} bits "
          f"(max fold count {counts.max_count()}) -> {out}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    if args.scene:
        spec = datagen.SceneSpec.from_json(Path(args.scene).read_text())
        spec.seed = args.seed if args.seed is not None else spec.seed
    else:
        spec = datagen.SceneSpec(
            width=args.width,
            height=args.height,
            n_frames=args.frames,
            channels=args.channels,
            n_blobs=args.blobs,
            blob_sigma_min=args.blob_sigma_min,
            blob_sigma_max=args.blob_sigma_max,
            ramp_gain=args.ramp_gain,
            max_speed=args.max_speed,
            seed=args.seed if args.seed is not None else 0,
        )
    datagen.write_dataset(
        out, spec, bits_a=args.bits_a, bits_b=args.bits_b,
        over_rate=args.over_rate, threads=args.threads,
    )
    bundle = datagen.load_dataset(out)  # re-reads and verifies the tuples
    _write_run_manifest(out, "synth", args)
    print(f"dataset of {bundle.data.truth.n_frames} frames "
          f"({args.bits_b}-bit truth, {args.bits_a}-bit folded, "
          f"max order {len(bundle.data.masks)}) -> {out}")
    return EXIT_OK


def _model_config_from(args: argparse.Namespace, bundle: datagen.DatasetBundle) -> ModelConfig:
    return ModelConfig(
        frame_height=bundle.spec.height,
        frame_width=bundle.spec.width,
        channels=bundle.spec.channels,
        clip_len=args.clip_len,
        bits_a=bundle.bits_a,
        patch=args.patch,
        embed_dim=args.embed_dim,
        token_dim=args.token_dim,
        n_layers=args.layers,
        n_heads=args.heads,
        mlp_dim=args.mlp_dim,
        tube_t=args.tube_t,
        tube_h=args.tube_h,
        tube_w=args.tube_w,
        radius=args.radius,
        fraction=args.fraction,
        seed=args.seed,
    ).validate()


def cmd_train(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    bundle = datagen.load_dataset(Path(args.data))
    cfg = _model_config_from(args, bundle)
    pairs = make_window_pairs(bundle.data.truth, bundle.bits_a, args.clip_len)
    params, losses = train_model(pairs, cfg, steps=args.steps, lr=args.lr, seed=args.seed)
    save_params(out / "model.ssvp", cfg, params)
    rows = "\n".join(f"{i}\t{value:.10f}" for i, value in enumerate(losses))
    (out / "train_loss.tsv").write_text("step\tloss\n" + rows + "\n")
    report.save_loss_curve(losses, out / "train_loss.png")
    _write_run_manifest(out, "train", args)
    print(f"trained {args.steps} steps on {len(pairs)} pairs "
          f"(final loss {losses[-1]:.4f}) -> {out / 'model.ssvp'}")
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    if args.data:
        bundle = datagen.load_dataset(Path(args.data))
        folded = bundle.data.modulo
        truth = bundle.data.truth
        bits_b = args.bits_b if args.bits_b else bundle.bits_b
    else:
        if not args.input:
            raise InvalidArgument("infer needs --data or --in")
        folded = clip_io.read_int_clip(Path(args.input))
        truth = clip_io.read_int_clip(Path(args.gt)) if args.gt else None
        if not args.bits_b:
            raise InvalidArgument("--bits-b is required with --in")
        bits_b = args.bits_b
    if args.predictor == "oracle":
        if truth is None:
            raise InvalidArgument("the oracle predictor needs ground truth (--data or --gt)")
        predictor = OraclePredictor(truth, folded.bit_depth)
    elif args.predictor == "flow-only":
        predictor = FlowOnlyPredictor(flow_block=args.flow_block, flow_radius=args.flow_radius)
    else:
        if not args.model:
            raise InvalidArgument("--model is required with the ssvit predictor")
        cfg, params = load_params(Path(args.model))
        predictor = SSVitPredictor(
            params,
            cfg,
            fraction=args.fraction,
            flow_block=args.flow_block,
            flow_radius=args.flow_radius,
            threads=args.threads,
        )
    recon = sliding_window_reconstruct(
        folded, predictor, args.clip_len, bits_b, include_leading=True
    )
    clip_io.write_int_clip(out, "recon", recon, bits_a=folded.bit_depth, bits_b=bits_b)
    _write_run_manifest(out, "infer", args)
    print(f"reconstructed {recon.n_frames} frames at {bits_b} bits -> {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    truth = clip_io.read_int_clip(Path(args.gt))
    recon = clip_io.read_int_clip(Path(args.recon))
    quality = imaging.evaluate_clip(
        truth.frames, recon.frames,
        exclude=args.exclude, windowed=args.windowed, threads=args.threads,
    )
    rows = ["frame\tpsnr\tssim"]
    for i, (p, s) in enumerate(zip(quality.psnr, quality.ssim)):
        rows.append(f"{i}\t{_fmt_metric(p)}\t{s:.6f}")
    (out / "eval.tsv").write_text("\n".join(rows) + "\n")
    summary = {
        "frames": len(quality.psnr),
        "exclude": quality.exclude,
        "windowed": bool(args.windowed),
        "psnr_mean": _fmt_metric(quality.psnr_mean),
        "ssim_mean": f"{quality.ssim_mean:.6f}",
        "exact_frames": sum(1 for p in quality.psnr if math.isinf(p)),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if not args.no_figures:
        report.save_metric_curves(quality, out / "metrics.png")
    _write_run_manifest(out, "eval", args)
    print(f"mean PSNR {_fmt_metric(quality.psnr_mean)} dB, "
          f"mean SSIM {quality.ssim_mean:.4f} over {len(quality.psnr)} frames -> {out}")
    return EXIT_OK


def cmd_tonemap(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    hdr = clip_io.read_float_clip(Path(args.input))
    if args.per_frame:
        mapped = imaging.tonemap_video_independent(hdr)
    else:
        mapped = imaging.tonemap_video(hdr, alpha=args.alpha)
    clip = IntClip(mapped.astype(np.int64), 8)
    clip_io.write_int_clip(out, "tm", clip, extra={"source": str(args.input)})
    report.save_frame_montage(mapped, out / "tonemap_preview.png", "tone-mapped preview")
    _write_run_manifest(out, "tonemap", args)
    print(f"tone-mapped {clip.n_frames} frames -> {out}")
    return EXIT_OK


def cmd_select(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    clip = clip_io.read_int_clip(Path(args.input))
    if args.model:
        from .sst_predictor import encode_frames  # local import keeps startup light

        cfg, params = load_params(Path(args.model))
        volume = encode_frames(params, clip, cfg)
    else:
        # raw patch features: each cell is its rasterized pixel block
        from .sst_predictor import ModelConfig as _MC, _patchify, geometry

        n, h, w, c = clip.frames.shape
        probe = _MC(
            frame_height=h, frame_width=w, channels=c, clip_len=n - 1,
            patch=args.patch, tube_h=args.patch, tube_w=args.patch,
        )
        geom = geometry(probe)
        frames01 = clip.frames.astype(np.float64) / float((1 << clip.bit_depth) - 1)
        cells = _patchify(frames01, geom)
        volume = EmbeddingVolume(
            cells.reshape(geom.window, geom.cells_h, geom.cells_w, -1)
        )
    scores = score_volume(volume, args.radius, threads=args.threads)
    files = []
    for s in range(scores.scores.shape[0]):
        name = f"nsm_{s:04d}.pfm"
        (out / name).write_bytes(clip_io.write_pfm(scores.scores[s].astype(np.float32)))
        files.append(name)
    manifest = clip_io.ClipManifest(
        fmt="pfm",
        width=scores.scores.shape[2],
        height=scores.scores.shape[1],
        channels=1,
        frame_count=scores.scores.shape[0],
        files=files,
        extra={"kind": "nsm-scores", "radius": str(args.radius)},
    )
    (out / "nsm.manifest").write_text(clip_io.write_manifest(manifest))
    selection = select_tokens(volume, args.radius, args.fraction, threads=args.threads)
    rows = ["rank\tt\tu\tv\tscore"]
    for rank, coord in enumerate(selection.selected_coords):
        rows.append(
            f"{rank}\t{coord[0]}\t{coord[1]}\t{coord[2]}\t"
            f"{scores.scores[coord]:.9f}"
        )
    (out / "selected.tsv").write_text("\n".join(rows) + "\n")
    report.save_heatmap(
        scores.scores[-1], out / "nsm_scores.png", "intricacy score (last frame)"
    )
    _write_run_manifest(out, "select", args)
    print(f"scored {scores.scores.size} positions, "
          f"selected {len(selection.selected_coords)} -> {out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modvid",
        description="Modulo-camera video simulation and reconstruction toolkit",
    )
    parser.add_argument("--version", action="version", version=f"modvid {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("fold", help="fold a stored clip to a lower bit depth")
    p.add_argument("--in", dest="input", required=True, help="clip manifest")
    p.add_argument("--bits-a", type=int, default=8)
    _add_common(p)
    p.set_defaults(func=cmd_fold)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    p.add_argument("--scene", help="scene spec JSON (overrides geometry flags)")
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--blobs", type=int, default=3)
    p.add_argument("--blob-sigma-min", type=float, default=0.12)
    p.add_argument("--blob-sigma-max", type=float, default=0.30)
    p.add_argument("--ramp-gain", type=float, default=0.25)
    p.add_argument("--max-speed", type=float, default=1.2)
    p.add_argument("--over-rate", type=float, default=0.25)
    p.add_argument("--bits-a", type=int, default=8)
    p.add_argument("--bits-b", type=int, default=12)
    p.add_argument("--seed", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the mask predictor on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clip-len", type=int, default=4)
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--token-dim", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--mlp-dim", type=int, default=128)
    p.add_argument("--tube-t", type=int, default=0)
    p.add_argument("--tube-h", type=int, default=4)
    p.add_argument("--tube-w", type=int, default=4)
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--fraction", type=float, default=1.0)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sliding-window reconstruction of a folded stream")
    p.add_argument("--data", help="dataset directory (provides folded clip and truth)")
    p.add_argument("--in", dest="input", help="folded clip manifest (alternative to --data)")
    p.add_argument("--gt", help="ground-truth manifest (for the oracle with --in)")
    p.add_argument("--predictor", choices=("oracle", "flow-only", "ssvit"), default="ssvit")
    p.add_argument("--model", help="checkpoint for the ssvit predictor")
    p.add_argument("--bits-b", type=int, default=None)
    p.add_argument("--clip-len", type=int, default=4)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--flow-block", type=int, default=8)
    p.add_argument("--flow-radius", type=int, default=3)
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM of a reconstruction against truth")
    p.add_argument("--gt", required=True, help="ground-truth manifest")
    p.add_argument("--recon", required=True, help="reconstruction manifest")
    p.add_argument("--exclude", type=int, default=4)
    p.add_argument("--windowed", action="store_true", help="11x11 Gaussian SSIM")
    p.add_argument("--no-figures", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tonemap", help="HDR clip to displayable 8-bit frames")
    p.add_argument("--in", dest="input", required=True, help="PFM clip manifest")
    p.add_argument("--alpha", type=float, default=0.9, help="temporal smoothing weight")
    p.add_argument("--per-frame", action="store_true",
                   help="independent per-frame mapping (flicker baseline)")
    _add_common(p)
    p.set_defaults(func=cmd_tonemap)

    p = sub.add_parser("select", help="dump intricacy scores for a stored clip")
    p.add_argument("--in", dest="input", required=True, help="clip manifest")
    p.add_argument("--model", help="checkpoint; otherwise raw patch features")
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--fraction", type=float, default=0.25)
    p.add_argument("--patch", type=int, default=4)
    _add_common(p)
    p.set_defaults(func=cmd_select)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ModvidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
