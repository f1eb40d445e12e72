"""Command-line entry point: ``gvdiff <command> [options]``.

Commands: train, sample, long-range, metrics, gate-stats, composite.
Settings come from ``--config`` (``key = value`` lines) with flags layered
on top; ``GVD_SEED`` in the environment overrides ``--seed``.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from gvdiff.config import RunConfig, load_config
from gvdiff.dgn import collect_skip_stats, trace_from_csv, trace_to_csv
from gvdiff.diffusion import (
    SGD,
    STAGES,
    TrainingExample,
    TrainRngs,
    evaluation_loss,
    load_checkpoint,
    sample_video,
    save_checkpoint,
    training_step,
)
from gvdiff.errors import GVDiffError
from gvdiff.grounding import load_track
from gvdiff.io import read_mask, read_video, write_video
from gvdiff.pipeline import (
    GenerationPlan,
    StubEmbedder,
    build_prompt_schedule,
    condition_similarity,
    generate_long_range,
    metrics_csv,
    object_composite,
    prompt_consistency,
    temporal_consistency,
)
from gvdiff.synthetic import moving_squares
from gvdiff.unet import BLOCK_NAMES, GroundedUNet

COMMANDS = ("train", "sample", "long-range", "metrics", "gate-stats", "composite")


def _prompt_at(text):
    frame, sep, prompt = text.partition(":")
    if not sep or not frame.strip().isdigit():
        raise argparse.ArgumentTypeError(f"expected FRAME:TEXT, got {text!r}")
    return int(frame), prompt


def build_parser():
    ap = argparse.ArgumentParser(prog="gvdiff", description="Grounded video diffusion at desk scale.")
    sub = ap.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True

    def common(p):
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output path")
        return p

    def generation(p):
        p.add_argument("--track", required=True, help="grounding track JSON")
        p.add_argument("--prompt", default=None)
        p.add_argument("--prompt-at", type=_prompt_at, action="append", default=[],
                       metavar="FRAME:TEXT", help="prompt keyframe (repeatable)")
        p.add_argument("--steps", type=int)
        p.add_argument("--scale", type=float)
        p.add_argument("--checkpoint", help="GVCK weights (default: fresh init)")

    p = common(sub.add_parser("train", help="train one stage on synthetic clips"))
    p.add_argument("--stage", choices=STAGES)
    p.add_argument("--train-steps", type=int)
    p.add_argument("--checkpoint", help="GVCK weights to start from")

    p = common(sub.add_parser("sample", help="sample one clip"))
    generation(p)

    p = common(sub.add_parser("long-range", help="auto-regressive long video"))
    generation(p)
    p.add_argument("--window", type=int)
    p.add_argument("--total-frames", type=int)

    p = common(sub.add_parser("metrics", help="consistency metrics of a latent video"))
    p.add_argument("--video", required=True)
    p.add_argument("--prompt", default=None)
    p.add_argument("--track", help="source track for condition similarity")
    p.add_argument("--generated-track", help="track extracted from the generated video")
    p.add_argument("--all-pairs", action="store_true", help="temporal consistency over all frame pairs")

    p = common(sub.add_parser("gate-stats", help="per-layer skip rates from a sampling run"))
    p.add_argument("--trace", required=True, help="gate trace CSV written by sample")
    p.add_argument("--plot", help="SVG chart path (default: <out>.svg)")

    p = common(sub.add_parser("composite", help="paste a generated object into a background"))
    p.add_argument("--background", required=True)
    p.add_argument("--generated", required=True)
    p.add_argument("--mask", required=True)
    return ap


def _settings(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    for key in ("steps", "scale", "seed", "window", "total_frames", "stage", "train_steps", "checkpoint"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    env = os.environ.get("GVD_SEED")
    if env not in (None, ""):
        try:
            cfg.seed = int(env)
        except ValueError:
            raise GVDiffError("config-value", f"GVD_SEED: cannot read {env!r} as int") from None
    return cfg


def _model(cfg):
    model = GroundedUNet(cfg.model)
    if cfg.checkpoint:
        load_checkpoint(model, cfg.checkpoint)
    return model


def _read_track(path):
    try:
        return load_track(path)
    except FileNotFoundError as exc:
        raise GVDiffError("missing-file", str(exc.filename or path)) from None


def _prompt(args, model, num_frames):
    if args.prompt_at:
        keys = sorted(args.prompt_at) if args.prompt is None else [(0, args.prompt)] + sorted(args.prompt_at)
        return build_prompt_schedule(keys, model.embedder, num_frames, model.config.text_tokens)
    return args.prompt or ""


def cmd_train(args, cfg):
    model = _model(cfg)
    videos = [moving_squares(cfg.train_frames, cfg.model.channels, cfg.model.height, cfg.model.width,
                             num_objects=1 + k % 2, seed=cfg.seed * 1000 + k)
              for k in range(cfg.train_videos)]
    data = [TrainingExample(v, t, p) for v, t, p in videos]
    opt = SGD(cfg.lr, cfg.usage_penalty)
    rngs = TrainRngs(cfg.seed)
    print(f"stage {cfg.stage}: eval loss {evaluation_loss(model, data, stage=cfg.stage):.6f}")
    for step in range(cfg.train_steps):
        batch = [data[(step * cfg.batch_size + i) % len(data)] for i in range(cfg.batch_size)]
        loss = training_step(batch, model, cfg.stage, opt, rngs, cond_drop=cfg.cond_drop)
        if (step + 1) % 10 == 0 or step + 1 == cfg.train_steps:
            print(f"step {step + 1}: loss {loss:.6f}")
    print(f"stage {cfg.stage}: eval loss {evaluation_loss(model, data, stage=cfg.stage):.6f}")
    save_checkpoint(model, args.out)
    return 0


def _write_trace(out, trace):
    path = Path(str(out) + ".gates.csv")
    path.write_text(trace_to_csv(trace))
    return path


def cmd_sample(args, cfg):
    track = _read_track(args.track)
    model = _model(cfg)
    prompt = _prompt(args, model, track.num_frames)
    table = prompt.table if hasattr(prompt, "table") else prompt
    trace = []
    video = sample_video(model, track, table, cfg.steps, cfg.scale, cfg.seed, trace=trace)
    write_video(args.out, video)
    _write_trace(args.out, trace)
    return 0


def cmd_long_range(args, cfg):
    track = _read_track(args.track)
    total = args.total_frames or track.num_frames
    if track.num_frames < total:
        raise GVDiffError("plan-coverage", f"track {args.track} has {track.num_frames} frames, need {total}")
    track = track.slice(0, total)
    model = _model(cfg)
    plan = GenerationPlan(total, cfg.window, cfg.chunk)
    prompt = _prompt(args, model, total)
    trace = []
    video = generate_long_range(model, track, prompt, plan, cfg.seed, cfg.steps, cfg.scale, trace=trace)
    write_video(args.out, video)
    _write_trace(args.out, trace)
    return 0


def cmd_metrics(args, cfg):
    video = read_video(args.video)
    emb = StubEmbedder(seed=cfg.model.embed_seed)
    values = {}
    if video.shape[0] >= 2:
        values["temporal_consistency"] = temporal_consistency(video, emb, args.all_pairs or cfg.all_pairs)
    if args.prompt is not None:
        values["prompt_consistency"] = prompt_consistency(video, args.prompt, emb)
    if args.track:
        src = _read_track(args.track)
        gen = _read_track(args.generated_track) if args.generated_track else src
        values["condition_similarity"] = condition_similarity(src, gen, cfg.model.width, cfg.model.height)
    Path(args.out).write_text(metrics_csv(values))
    return 0


def skip_chart(report, path):
    """Bar chart of skip percentage per gated layer, written as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "gvdiff"
    layers = [r[0] for r in report.rows]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(layers, [r[1] for r in report.rows], color="tab:blue")
    ax.set_xlabel("layer index")
    ax.set_ylabel("skip percent")
    ax.set_ylim(0, 100)
    ax.set_xticks(layers)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_gate_stats(args, cfg):
    try:
        text = Path(args.trace).read_text()
    except FileNotFoundError:
        raise GVDiffError("missing-file", args.trace) from None
    report = collect_skip_stats(trace_from_csv(text), len(BLOCK_NAMES))
    Path(args.out).write_text(report.to_csv())
    try:
        skip_chart(report, args.plot or str(args.out) + ".svg")
    except ImportError:
        print("matplotlib not installed; skipping the chart", file=sys.stderr)
    return 0


def cmd_composite(args, cfg):
    bg = read_video(args.background)
    gen = read_video(args.generated)
    mask = read_mask(args.mask)
    write_video(args.out, object_composite(bg, gen, mask))
    return 0


HANDLERS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "long-range": cmd_long_range,
    "metrics": cmd_metrics,
    "gate-stats": cmd_gate_stats,
    "composite": cmd_composite,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _settings(args)
        return HANDLERS[args.command](args, cfg)
    except GVDiffError as exc:
        print(f"gvdiff {args.command}: error [{exc.code}]: {exc.message}", file=sys.stderr)
        return 1


def run_cli(argv=None):
    """Like :func:`main` but returns argparse's exit status instead of raising."""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1


if __name__ == "__main__":
    sys.exit(main())
