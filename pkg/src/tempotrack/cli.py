"""Command-line entry point.

Exit codes: 0 success, 2 usage or input error, 3 runtime/numeric failure.
Config precedence: CLI flag > --config file (key: value lines) > defaults.
Every command is deterministic under fixed arguments and seeds.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import evaluation, formats, tracker
from .adapter import AdapterConfig, ConfigError
from .backbone import BackboneConfig
from .pipeline import TrackingModel
from .synthdata import SceneSpec, generate_dataset, split_by_parity
from .training import (
    TrainConfig,
    TrainingDiverged,
    train_stage_a,
    train_stage_b,
    write_loss_log,
)

USAGE_ERROR = 2
RUNTIME_ERROR = 3


class CliError(Exception):
    def __init__(self, message, code=USAGE_ERROR):
        super().__init__(message)
        self.code = code


def _load_config_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return formats.decode_kv(f.read())
    except OSError as e:
        raise CliError(f"cannot read config file: {e}") from e


def _resolved(args, key, cast, default):
    """flag > config file > default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if args.config_values and key in args.config_values:
        raw = args.config_values[key]
        return cast(raw) if cast is not bool else raw not in ("0", "false", "False")
    return default


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lr=_resolved(args, "lr", float, 1e-4),
        weight_decay=_resolved(args, "weight_decay", float, 1e-4),
        iters=_resolved(args, "iters", int, 2000),
        warmup_iters=_resolved(args, "warmup_iters", int, 100),
        batch_clips=_resolved(args, "batch_clips", int, 1),
        queries_per_batch=_resolved(args, "queries_per_batch", int, 64),
        huber_delta=_resolved(args, "huber_delta", float, 1.0),
        seed=_resolved(args, "seed", int, 0),
    )


def _matcher_config(args) -> tracker.MatcherConfig:
    return tracker.MatcherConfig(
        tau=_resolved(args, "tau", float, 20.0),
        mask_radius=_resolved(args, "mask_radius", float, 5.0),
    )


def _load_clips(args, default_split):
    clips = formats.read_dataset(args.data)
    split = getattr(args, "split", None) or default_split
    if split == "all":
        return clips
    train, held = split_by_parity(clips)
    chosen = train if split == "train" else held
    if not chosen:
        raise CliError(f"dataset {args.data} has no clips in split {split!r}")
    return chosen


def _add_train_flags(p):
    p.add_argument("--config", help="key: value config file (flags still win)")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--warmup-iters", dest="warmup_iters", type=int)
    p.add_argument("--batch-clips", dest="batch_clips", type=int)
    p.add_argument("--queries-per-batch", dest="queries_per_batch", type=int)
    p.add_argument("--huber-delta", dest="huber_delta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--mask-radius", dest="mask_radius", type=float)
    p.add_argument("--split", choices=["train", "held", "all"],
                   help="which parity split of the dataset to use (default: train)")
    p.add_argument("--loss-log", dest="loss_log", help="write per-iteration loss here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tempotrack",
        description="Desk-scale temporal-adapter point tracking",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render a synthetic dataset file")
    p.add_argument("--n-clips", dest="n_clips", type=int, default=10)
    p.add_argument("--seed", type=int, default=0, help="base seed; clip i uses seed+i")
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--sprites", type=int, default=3)
    p.add_argument("--tracks", type=int, default=64)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="stage A: train the backbone on 2-frame sub-clips")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    _add_train_flags(p)

    p = sub.add_parser("train-adapter", help="stage B: freeze backbone, train adapters")
    p.add_argument("--data", required=True)
    p.add_argument("--backbone", required=True, help="stage A checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--aggregation", choices=["attn1d", "conv1d", "conv3d"])
    p.add_argument("--placement", help="all|early|later|alternating or comma slots")
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--bottleneck", type=int, help="adapter bottleneck channels")
    p.add_argument("--temporal-bias", dest="temporal_bias", action="store_true", default=None)
    _add_train_flags(p)

    p = sub.add_parser("track", help="track queries through one clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--clip", type=int, default=0, help="clip index within the dataset file")
    p.add_argument("--queries", help="text file of 'x y t' lines")
    p.add_argument("--grid", type=int, help="track an NxN grid of queries at t=0")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="delta accuracies over a dataset split")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["strided", "first"], default="strided")
    p.add_argument("--split", choices=["train", "held", "all"])
    p.add_argument("--oracle", action="store_true",
                   help="score the ground truth against itself (harness self-test)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("dump-features", help="PCA feature images for one clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--clip", type=int, default=0)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    return parser


def cmd_generate_data(args) -> int:
    if args.n_clips < 1:
        raise CliError(f"--n-clips must be >= 1, got {args.n_clips}")
    template = SceneSpec(
        seed=0, frames=args.frames, height=args.height, width=args.width,
        n_sprites=args.sprites, tracks_per_clip=args.tracks,
    )
    generate_dataset(args.n_clips, args.seed, template, args.out)
    print(f"wrote {args.n_clips} clips to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    clips = _load_clips(args, "train")
    config = _train_config(args)
    bb_config = BackboneConfig(height=args.height, width=args.width, patch=args.patch,
                               dim=args.dim, depth=args.depth, heads=args.heads)
    model, log = train_stage_a(clips, bb_config, config, matcher=_matcher_config(args))
    model.save(args.out, extra_meta={"train_clips": len(clips)})
    if args.loss_log:
        write_loss_log(args.loss_log, log)
    print(f"stage A done: {config.iters} iters, final loss {log[-1][2]:.6f}, "
          f"checkpoint {args.out}")
    return 0


def cmd_train_adapter(args) -> int:
    clips = _load_clips(args, "train")
    config = _train_config(args)
    try:
        model = TrackingModel.load(args.backbone)
    except FileNotFoundError as e:
        raise CliError(f"backbone checkpoint not found: {e}") from e
    adapter_config = AdapterConfig(
        stride=_resolved(args, "stride", int, 2),
        window=_resolved(args, "window", int, 13),
        c_in=model.backbone.config.dim,
        c_out=_resolved(args, "bottleneck", int, model.backbone.config.dim // 4),
        aggregation=_resolved(args, "aggregation", str, "attn1d"),
        placement=_parse_placement(_resolved(args, "placement", str, "all")),
        temporal_bias=bool(_resolved(args, "temporal_bias", bool, False)),
    )
    adapted, log = train_stage_b(model, clips, adapter_config, config)
    adapted.save(args.out, extra_meta={"train_clips": len(clips)})
    if args.loss_log:
        write_loss_log(args.loss_log, log)
    print(f"stage B done: {config.iters} iters, final loss {log[-1][2]:.6f}, "
          f"{len(adapted.adapters)} adapters, checkpoint {args.out}")
    return 0


def _parse_placement(raw):
    if raw in ("all", "early", "later", "alternating"):
        return raw
    try:
        return tuple(int(s) for s in str(raw).split(","))
    except ValueError as e:
        raise CliError(f"bad placement {raw!r}") from e


def cmd_track(args) -> int:
    clips = formats.read_dataset(args.data)
    if not 0 <= args.clip < len(clips):
        raise CliError(f"clip index {args.clip} out of range (dataset has {len(clips)})")
    clip = clips[args.clip]
    model = TrackingModel.load(args.checkpoint)
    if (args.queries is None) == (args.grid is None):
        raise CliError("provide exactly one of --queries or --grid")
    if args.grid is not None:
        if args.grid < 1:
            raise CliError(f"--grid must be >= 1, got {args.grid}")
        h, w = clip.frames.shape[1:3]
        queries = [
            tracker.QueryPoint(x=(i + 0.5) * w / args.grid, y=(j + 0.5) * h / args.grid, t=0)
            for j in range(args.grid)
            for i in range(args.grid)
        ]
    else:
        queries = formats.read_queries_file(args.queries)
    preds = model.track(clip.frames_float(), queries)
    formats.write_trajectories(args.out, args.clip, "grid" if args.grid else "file",
                               clip.frames.shape[0], preds)
    print(f"tracked {len(queries)} queries on clip {args.clip} -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    clips = _load_clips(args, "held")
    if args.oracle:
        model = None
    elif args.checkpoint is None:
        raise CliError("--checkpoint is required unless --oracle is given")
    else:
        model = TrackingModel.load(args.checkpoint)
    try:
        report = evaluation.evaluate(model, clips, args.mode, oracle=args.oracle)
    except evaluation.EvalError as e:
        raise CliError(str(e), code=RUNTIME_ERROR) from e
    report.config.update({} if model is None else model.config_meta())
    report.config["checkpoint"] = args.checkpoint or "oracle"
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(report.to_text())
    print("threshold\taccuracy")
    for thr in sorted(report.accuracies):
        print(f"{int(thr)}px\t{report.accuracies[thr]:.4f}")
    print(f"avg\t{report.avg_accuracy:.4f}")
    return 0


def cmd_dump_features(args) -> int:
    clips = formats.read_dataset(args.data)
    if not 0 <= args.clip < len(clips):
        raise CliError(f"clip index {args.clip} out of range (dataset has {len(clips)})")
    model = TrackingModel.load(args.checkpoint)
    from . import tensor as tt

    with tt.no_grad():
        feats = model.extract_features(clips[args.clip].frames_float())
    paths = evaluation.pca_dump(feats.data, args.out_dir)
    print(f"wrote {len(paths)} feature images to {args.out_dir}")
    return 0


_COMMANDS = {
    "generate-data": cmd_generate_data,
    "pretrain": cmd_pretrain,
    "train-adapter": cmd_train_adapter,
    "track": cmd_track,
    "evaluate": cmd_evaluate,
    "dump-features": cmd_dump_features,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.config_values = {}
    if getattr(args, "config", None):
        args.config_values = _load_config_file(args.config)
    try:
        return _COMMANDS[args.command](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR
    except (formats.FormatError, ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
