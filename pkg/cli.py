"""Command-line entry point: ``python cli.py <subcommand> ...``."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

import pipeline
from bucketizer import load_report, plan_epoch
from config import LOG_FILE, LOG_LEVEL
from dataprep import PrepConfig, discover_videos, load_video, run_pipeline
from errors import ArgumentError, KitError
from latent_codec import VideoCodec, roundtrip_report, save_latent, segment_clips
from numerics import make_rng, save_vten
from stdit_model import STDiT, describe
from utils import ensure_dir, setup_logging, slugify

logger = logging.getLogger(__name__)


def _dataset_videos(dataset):
    return [dataset.videos[cid] for cid in dataset.clip_ids]


def cmd_synth(args, cfg):
    spec = cfg.synth
    dataset = pipeline.make_synthetic(args.count or spec.count, spec, cfg.seed)
    out = pipeline.save_dataset(dataset, args.out)
    print(f"Wrote {len(dataset)} clips to {out}")


def cmd_prep(args, cfg):
    videos = discover_videos(Path(args.input).resolve())
    captions = {}
    if args.captions:
        table = pd.read_csv(args.captions)
        if not {"source_id", "caption"} <= set(table.columns):
            raise ArgumentError("captions CSV needs columns source_id and caption")
        captions = dict(zip(table["source_id"], table["caption"]))
    prep = PrepConfig(max_workers=args.workers) if args.workers else PrepConfig()
    result = run_pipeline(videos, prep, captions, args.out)
    kept = int(result.manifest["keep"].sum()) if len(result.manifest) else 0
    print(f"{len(result.manifest)} clips scored, {kept} kept, {len(result.errors)} sources failed")


def cmd_codec_train(args, cfg):
    dataset = pipeline.load_dataset(args.data)
    codec, history = pipeline.train_codec_stack(cfg.codec, _dataset_videos(dataset), cfg.seed)
    out = ensure_dir(args.out)
    codec.save(out)
    history.to_csv(out / "codec_loss.csv", index=False)
    print(f"Saved codec to {out}")


def cmd_codec_roundtrip(args, cfg):
    if not (args.input or args.data):
        raise ArgumentError("codec-roundtrip needs --data or --input")
    codec = VideoCodec.load(args.codec)
    if args.input:
        clips = {f"{Path(args.input).stem}-{i}": c for i, c in enumerate(segment_clips(load_video(args.input)))}
    else:
        dataset = pipeline.load_dataset(args.data)
        clips = {cid: dataset.videos[cid] for cid in dataset.clip_ids}
    if args.out:
        out = ensure_dir(args.out)
        for clip_id, clip in clips.items():
            save_latent(out / f"{clip_id}.latent.vten", codec.encode(clip))
            save_vten(out / f"{clip_id}.recon.vten", codec.roundtrip(clip))
    if args.metrics:
        report = roundtrip_report(codec, clips)
        print(report.to_csv(index=False), end="")


def _parse_stages(text: Optional[str], cfg) -> list:
    if not text:
        return cfg.stages
    wanted = {int(part) for part in text.split(",") if part.strip()}
    chosen = [s for s in cfg.stages if s.stage in wanted]
    if len(chosen) != len(wanted):
        raise ArgumentError(f"unknown stages in {text!r}; configured: {[s.stage for s in cfg.stages]}")
    return chosen


def cmd_train(args, cfg):
    dataset = pipeline.load_dataset(args.data)
    codec = VideoCodec.load(args.codec)
    result = pipeline.train(cfg, codec, dataset, args.out, stages=_parse_stages(args.stages, cfg), resume=args.resume)
    last = result.log["smoothed"].iloc[-1] if len(result.log) else float("nan")
    print(f"Trained {len(result.log)} steps, smoothed loss {last:.5f}; checkpoints: {', '.join(map(str, result.checkpoints))}")


def cmd_validate(args, cfg):
    codec = VideoCodec.load(args.codec)
    heldout = pipeline.load_dataset(args.heldout) if args.heldout else pipeline.heldout_set(cfg)
    model = pipeline.load_model(args.checkpoint)
    grid = pipeline.validate(model, codec, heldout, cfg.validation, cfg.flow)
    cells = grid.cells
    if args.baseline:
        baseline = pipeline.validate(STDiT(model.config), codec, heldout, cfg.validation, cfg.flow)
        cells = cells.assign(baseline=baseline.cells["loss"].to_numpy())
    if args.out:
        pipeline.ValidationGrid(cells).to_csv(args.out)
    print(cells.to_csv(index=False), end="")
    logger.info(f"Validation total {grid.total:.5f}")


def _read_condition(path: Optional[str]) -> Optional[np.ndarray]:
    if not path:
        return None
    if str(path).endswith(".npy"):
        return np.load(path).astype(np.float32)
    return load_video(path)


def cmd_sample(args, cfg):
    model = pipeline.load_model(args.checkpoint)
    codec = VideoCodec.load(args.codec)
    result = pipeline.generate(
        model, codec, args.prompt, args.frames, args.height, args.width,
        steps=args.steps or cfg.flow.steps, seed=args.seed, condition_video=_read_condition(args.condition_frames),
        condition=args.condition, fps=args.fps, guidance_scale=args.guidance,
        aesthetic=args.aesthetic, motion=args.motion, camera=args.camera, flow=cfg.flow,
    )
    out = ensure_dir(args.out)
    name = slugify(args.prompt) or "sample"
    save_latent(out / f"{name}.latent.vten", result.latent)
    save_vten(out / f"{name}.video.vten", result.video)
    (out / f"{name}.txt").write_text(result.caption + "\n")
    print(f"Wrote {result.video.shape[0]} frames to {out}")


def cmd_bucket_plan(args, cfg):
    dataset = pipeline.load_dataset(args.data)
    buckets = cfg.buckets
    if args.stage is not None:
        buckets = _parse_stages(str(args.stage), cfg)[0].resolve_buckets(cfg.buckets)
    plan = plan_epoch(dataset.metas(), buckets, make_rng(cfg.seed, "bucket-plan"))
    report = load_report(plan)
    print(report.to_csv(index=False), end="")
    if not args.dry_run:
        out = ensure_dir(args.out)
        plan.to_frame().to_csv(out / "epoch_plan.csv", index=False)
        report.to_csv(out / "load_report.csv", index=False)


def cmd_model_describe(args, cfg):
    model = pipeline.load_model(args.checkpoint) if args.checkpoint else STDiT(cfg.model)
    print(describe(model).to_csv(index=False), end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="open-sora-kit", description="Desk-scale video generation kit")
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--log-file", default=None, help="Also log to this rotating file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate a synthetic moving-shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep", help="Cut, score and filter raw videos into a manifest")
    p.add_argument("--input", required=True, help="Directory of .vten videos or .npy frame folders")
    p.add_argument("--out", required=True)
    p.add_argument("--captions", help="CSV with source_id, caption")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("codec-train", help="Train the video codec on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_codec_train)

    p = sub.add_parser("codec-roundtrip", help="Encode and decode clips")
    p.add_argument("--codec", required=True)
    p.add_argument("--data", help="Dataset directory")
    p.add_argument("--input", help="Single .vten video, cut into codec clips")
    p.add_argument("--out", help="Write latents and reconstructions here")
    p.add_argument("--metrics", action="store_true", help="Print per-clip SSIM/PSNR as CSV")
    p.set_defaults(func=cmd_codec_roundtrip)

    p = sub.add_parser("train", help="Staged STDiT training")
    p.add_argument("--data", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stages", help="Comma-separated stage ids (default: all)")
    p.add_argument("--resume", help="Stage checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("validate", help="Validation loss over the length x resolution grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--heldout", help="Held-out dataset (default: synthetic)")
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--baseline", action="store_true", help="Add a column for the untrained model")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("sample", help="Generate a clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=17)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--steps", type=int, default=None, help="Euler steps (default: [flow] steps)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fps", type=float, default=4.0)
    p.add_argument("--condition", default="none", help="first:k, last:k, firstlast:k, frames:i,j or none")
    p.add_argument("--condition-frames", help="Conditioning image (.npy) or video (.vten)")
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("--aesthetic", type=float, default=None)
    p.add_argument("--motion", type=float, default=None)
    p.add_argument("--camera", default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("bucket-plan", help="Plan one epoch and print the bucket load report")
    p.add_argument("--data", required=True)
    p.add_argument("--stage", type=int, default=None)
    p.add_argument("--out", default="bucket_plan")
    p.add_argument("--dry-run", action="store_true", help="Print the report only")
    p.set_defaults(func=cmd_bucket_plan)

    p = sub.add_parser("model-describe", help="Parameter census of a model")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_model_describe)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging("DEBUG" if args.verbose else LOG_LEVEL, args.log_file or LOG_FILE)
    try:
        cfg = pipeline.load_config(args.config)
        args.func(args, cfg)
    except KitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
