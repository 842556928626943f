"""Command-line interface: train, encode, decode, eval, sweep, genmap, optimize-map.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 training
abort, 4 bitstream/checkpoint errors. All randomness flows through one
seeded generator per command (--seed, default 0).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import torch

from . import codec, entropy, evaluate, qmap as qmap_mod, rangecoder, train as train_mod
from .model import CheckpointError, LocalRateCodec, load_checkpoint
from .train import ClipDatasetSpec, ConfigError, SyntheticClips, TrainingAbort

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_STREAM = 4


# ---------------------------------------------------------------------------
# Input helpers
# ---------------------------------------------------------------------------

def _load_frame(path: str) -> np.ndarray:
    from PIL import Image

    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def _save_frame(path: str, frame: np.ndarray):
    from PIL import Image

    arr = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _image_files(directory: str) -> list:
    names = sorted(
        f for f in os.listdir(directory)
        if f.lower().endswith((".png", ".jpg", ".jpeg", ".bmp"))
    )
    if not names:
        raise ConfigError(f"no image files in {directory}")
    return [os.path.join(directory, f) for f in names]


def load_clip_dir(directory: str) -> np.ndarray:
    if not os.path.isdir(directory):
        raise ConfigError(f"{directory} is not a directory")
    frames = [_load_frame(p) for p in _image_files(directory)]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ConfigError(f"frames in {directory} have mixed sizes: {shapes}")
    return np.stack(frames)


def load_clips(root: str) -> list:
    """A directory of clip subdirectories, or a single flat clip directory."""
    if not os.path.isdir(root):
        raise ConfigError(f"{root} is not a directory")
    subdirs = sorted(
        os.path.join(root, d) for d in os.listdir(root)
        if os.path.isdir(os.path.join(root, d))
    )
    if subdirs:
        return [load_clip_dir(d) for d in subdirs]
    return [load_clip_dir(root)]


def parse_synthetic(spec: str) -> list:
    """Synthetic clip set description: count=8,frames=6,size=64,seed=0."""
    params = {"count": 8, "frames": 6, "size": 64, "seed": 0}
    if spec:
        for item in spec.split(","):
            key, _, value = item.partition("=")
            if key not in params:
                raise ConfigError(f"unknown synthetic parameter {key!r}")
            params[key] = int(value)
    ds = SyntheticClips(ClipDatasetSpec(
        source="synthetic", clip_length=params["frames"], crop=params["size"],
        count=params["count"], seed=params["seed"],
    ))
    return [ds.clip(i, params["frames"]) for i in range(params["count"])]


def _clips_from_args(args) -> list:
    if getattr(args, "synthetic", None) is not None:
        return parse_synthetic(args.synthetic)
    if getattr(args, "frames", None):
        return load_clips(args.frames)
    raise ConfigError("provide --frames DIR or --synthetic SPEC")


def parse_region(spec: str):
    kind, _, rest = spec.partition(":")
    if kind != "rect":
        raise ConfigError(f"unsupported region type {kind!r}")
    try:
        x, y, w, h = (int(v) for v in rest.split(","))
    except ValueError as e:
        raise ConfigError(f"bad region spec {spec!r}") from e
    return qmap_mod.Rect(x, y, w, h)


def parse_qmap_source(spec: str, height: int, width: int, n_frames: int) -> np.ndarray:
    """Quality-map source: a file/directory path, uniform:<v> or
    rect:<x,y,w,h,v,bg>."""
    if spec.startswith("uniform:"):
        level = float(spec.split(":", 1)[1])
        m = qmap_mod.uniform_map(height, width, level)
        return np.broadcast_to(m, (n_frames, height, width)).copy()
    if spec.startswith("rect:"):
        parts = spec.split(":", 1)[1].split(",")
        if len(parts) != 6:
            raise ConfigError("rect map spec needs x,y,w,h,level,background")
        x, y, w, h = (int(v) for v in parts[:4])
        level, background = float(parts[4]), float(parts[5])
        m = qmap_mod.compose_region_map(
            height, width, background, [(qmap_mod.Rect(x, y, w, h), level)]
        )
        return np.broadcast_to(m, (n_frames, height, width)).copy()
    if os.path.isdir(spec):
        files = sorted(
            os.path.join(spec, f) for f in os.listdir(spec)
            if f.lower().endswith((".png", ".pgm", ".bmp", ".qmap"))
        )
        if len(files) < n_frames:
            raise ConfigError(f"{spec} holds {len(files)} maps, need {n_frames}")
        maps = np.stack([qmap_mod.load_qmap(f) for f in files[:n_frames]])
    elif os.path.isfile(spec):
        maps = np.broadcast_to(qmap_mod.load_qmap(spec), (n_frames, height, width)).copy()
    else:
        raise ConfigError(f"quality map source {spec!r} not found")
    if maps.shape[1:] != (height, width):
        raise ConfigError(
            f"quality map size {maps.shape[1:]} does not match frames "
            f"({height}x{width})"
        )
    return maps


def _load_model(path: str) -> LocalRateCodec:
    if not os.path.isfile(path):
        raise ConfigError(f"checkpoint {path!r} not found")
    model, _ = load_checkpoint(path)
    return model


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = train_mod.load_train_config(args.config)
    torch.manual_seed(cfg.seed)
    model = LocalRateCodec(cfg.model)
    paths = train_mod.run_schedule(
        model, cfg, args.out, resume_from=args.resume, progress=args.progress
    )
    print(f"wrote {len(paths)} checkpoint(s) to {args.out}")
    return EXIT_OK


def cmd_genmap(args) -> int:
    mix = tuple(float(v) for v in args.mix.split(","))
    cfg = qmap_mod.MapGenConfig(
        mix=mix, delta=args.delta, kernel=args.kernel,
        shape_count=tuple(int(v) for v in args.shapes.split(",")),
    )
    os.makedirs(args.out, exist_ok=True)
    seq = qmap_mod.MapSequence(args.height, args.width, cfg, seed=args.seed)
    ext = "qmap" if args.raw else "png"
    for t, m in enumerate(seq.maps(args.frames)):
        qmap_mod.save_qmap(os.path.join(args.out, f"map_{t:04d}.{ext}"), m)
    print(f"wrote {args.frames} map(s) to {args.out}")
    return EXIT_OK


def cmd_encode(args) -> int:
    model = _load_model(args.checkpoint)
    clip = load_clip_dir(args.frames)
    n_frames, height, width = clip.shape[:3]
    maps = parse_qmap_source(args.qmap, height, width, n_frames)
    coded = codec.encode_video(model, clip, maps, backend=args.coder)
    with open(args.out, "wb") as f:
        f.write(coded.data)
    pixels = n_frames * height * width
    print(
        f"encoded {n_frames} frame(s) {width}x{height}: {len(coded.data)} bytes, "
        f"{coded.total_bits / pixels:.4f} bpp"
    )
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _load_model(args.checkpoint)
    with open(args.bitstream, "rb") as f:
        data = f.read()
    decoded = codec.decode_video(model, data, backend=args.coder)
    os.makedirs(args.out, exist_ok=True)
    for t in range(decoded.frames.shape[0]):
        _save_frame(os.path.join(args.out, f"frame_{t:04d}.png"), decoded.frames[t])
        if args.save_maps:
            qmap_mod.save_qmap(
                os.path.join(args.out, f"map_{t:04d}.png"), decoded.maps[t]
            )
    print(f"decoded {decoded.frames.shape[0]} frame(s) into {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    clip = load_clip_dir(args.frames)
    n_frames, height, width = clip.shape[:3]
    region = parse_region(args.region) if args.region else None
    mask = qmap_mod.region_mask(region, height, width) if region else None
    rows = []
    if args.recon:
        recon = load_clip_dir(args.recon)
        if recon.shape != clip.shape:
            raise ConfigError("reconstruction clip shape does not match input")
        for t in range(n_frames):
            rows.append(evaluate.MetricsRow(
                clip="clip000", frame=t, level="-",
                bpp_total=0.0, bpp_latent=0.0, bpp_qmap=0.0,
                psnr=evaluate.psnr(clip[t], recon[t]),
                psnr_in_region=evaluate.psnr(clip[t], recon[t], mask) if mask is not None else None,
                psnr_out_region=evaluate.psnr(clip[t], recon[t], ~mask) if mask is not None else None,
            ))
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint required unless --recon is given")
        model = _load_model(args.checkpoint)
        maps = parse_qmap_source(args.qmap, height, width, n_frames)
        coded = codec.encode_video(model, clip, maps, backend=args.coder)
        decoded = codec.decode_video(model, coded.data, backend=args.coder)
        for t in range(n_frames):
            stats = coded.frame_stats[t]
            rows.append(evaluate.MetricsRow(
                clip="clip000", frame=t, level=args.qmap,
                bpp_total=evaluate.bpp(stats.latent_bits + stats.qmap_bits, height, width),
                bpp_latent=evaluate.bpp(stats.latent_bits, height, width),
                bpp_qmap=evaluate.bpp(stats.qmap_bits, height, width),
                psnr=evaluate.psnr(clip[t], decoded.frames[t]),
                psnr_in_region=evaluate.psnr(clip[t], decoded.frames[t], mask) if mask is not None else None,
                psnr_out_region=evaluate.psnr(clip[t], decoded.frames[t], ~mask) if mask is not None else None,
            ))
            heat = evaluate.heatmap_from_stats(stats, model.config, height, width)
            evaluate.save_heatmap(heat, os.path.join(args.out, f"heatmap_{t:04d}.png"))
    evaluate.write_metrics_csv(rows, os.path.join(args.out, "metrics.csv"))
    mean_psnr = float(np.mean([r.psnr for r in rows]))
    print(f"evaluated {len(rows)} frame(s); mean PSNR {mean_psnr:.2f} dB")
    return EXIT_OK


def cmd_sweep(args) -> int:
    model = _load_model(args.checkpoint)
    clips = _clips_from_args(args)
    levels = None
    if args.levels:
        levels = [float(v) for v in args.levels.split(",")]
    os.makedirs(args.out, exist_ok=True)
    result = evaluate.sweep_uniform(model, clips, levels, backend=args.coder)
    evaluate.write_metrics_csv(result.rows, os.path.join(args.out, "sweep_metrics.csv"))
    try:
        curve = result.curve()
        evaluate.write_rd_csv([curve], os.path.join(args.out, "rd.csv"))
        evaluate.plot_rd_curves([curve], os.path.join(args.out, "rd.png"))
    except ValueError:
        # bpp not strictly increasing (e.g. untrained model): still emit points
        with open(os.path.join(args.out, "rd.csv"), "w") as f:
            f.write("curve,label,bpp,psnr\n")
            for p in result.points:
                f.write(f"uniform,{p.label},{p.bpp:.6f},{p.psnr:.4f}\n")
    for p in result.points:
        print(f"{p.label}: {p.bpp:.4f} bpp, {p.psnr:.2f} dB")
    return EXIT_OK


def cmd_optimize_map(args) -> int:
    model = _load_model(args.checkpoint)
    clips = _clips_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    lambdas = [float(v) for v in args.lam.split(",")]
    rows = []
    for li, lam in enumerate(lambdas):
        for ci, clip in enumerate(clips):
            result = evaluate.optimize_qmap(
                model, clip, lam, steps=args.steps, step_size=args.step_size,
                seed=args.seed, backend=args.coder,
            )
            best_uniform = min(result.uniform_objectives.values()) \
                if result.uniform_objectives else float("nan")
            print(
                f"lambda={lam:g} clip{ci:03d}: objective {result.objective:.5f} "
                f"(best uniform {best_uniform:.5f}, init level {result.init_level:.3f})"
            )
            for t in range(result.maps.shape[0]):
                qmap_mod.save_qmap(
                    os.path.join(args.out, f"lam{li}_clip{ci:03d}_map{t:04d}.png"),
                    result.maps[t],
                )
            coded = codec.encode_video(model, clip, result.maps, backend=args.coder)
            height, width = clip.shape[1:3]
            for t in range(clip.shape[0]):
                stats = coded.frame_stats[t]
                rows.append(evaluate.MetricsRow(
                    clip=f"clip{ci:03d}", frame=t, level=f"lambda={lam:g}",
                    bpp_total=evaluate.bpp(stats.latent_bits + stats.qmap_bits, height, width),
                    bpp_latent=evaluate.bpp(stats.latent_bits, height, width),
                    bpp_qmap=evaluate.bpp(stats.qmap_bits, height, width),
                    psnr=evaluate.psnr(clip[t], coded.reconstructions[t]),
                ))
    evaluate.write_metrics_csv(rows, os.path.join(args.out, "optimize_metrics.csv"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lrcvc",
        description="Neural video codec with pixel-granular local rate control",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the staged training schedule")
    p.add_argument("--config", required=True, help="YAML training configuration")
    p.add_argument("--out", required=True, help="output directory for checkpoints")
    p.add_argument("--resume", default=None, help="stage-end checkpoint to resume from")
    p.add_argument("--progress", action="store_true", help="print step losses")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("genmap", help="generate a constrained-random map sequence")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mix", default="0.4,0.3,0.3", help="field,shape,constant weights")
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--kernel", type=int, default=32)
    p.add_argument("--shapes", default="1,4", help="shape count range lo,hi")
    p.add_argument("--raw", action="store_true", help="write .qmap float files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_genmap)

    p = sub.add_parser("encode", help="encode a clip directory to a bitstream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True, help="directory of numbered frames")
    p.add_argument("--qmap", required=True,
                   help="map source: file|dir|uniform:<v>|rect:<x,y,w,h,v,bg>")
    p.add_argument("--coder", default=None, choices=("auto", "reference", "native"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a bitstream to frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bitstream", required=True)
    p.add_argument("--coder", default=None, choices=("auto", "reference", "native"))
    p.add_argument("--save-maps", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="code a clip and report metrics")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--frames", required=True)
    p.add_argument("--recon", default=None,
                   help="existing reconstruction directory (skips coding)")
    p.add_argument("--qmap", default="uniform:0.5")
    p.add_argument("--region", default=None, help="rect:<x,y,w,h> for regional PSNR")
    p.add_argument("--coder", default=None, choices=("auto", "reference", "native"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="uniform-map rate-distortion sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", default=None, help="directory of clip subdirectories")
    p.add_argument("--synthetic", default=None,
                   help="synthetic clips: count=8,frames=6,size=64,seed=0")
    p.add_argument("--levels", default=None, help="comma list; default 21-point grid")
    p.add_argument("--coder", default=None, choices=("auto", "reference", "native"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("optimize-map", help="inference-time quality-map optimization")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", default=None)
    p.add_argument("--synthetic", default=None)
    p.add_argument("--lambda", dest="lam", required=True,
                   help="comma list of lambda targets")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--step-size", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coder", default=None, choices=("auto", "reference", "native"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_optimize_map)

    return parser


def main(argv=None) -> int:
    torch.use_deterministic_algorithms(True)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingAbort as e:
        print(f"training aborted: {e} {e.diagnostics}", file=sys.stderr)
        return EXIT_TRAINING
    except (entropy.BitstreamError, CheckpointError, rangecoder.RangeCoderError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STREAM
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
