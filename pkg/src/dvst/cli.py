"""Command-line entry points: train, transmit, sweep, cliff, bdrate, ablate.

The DVST_SEED environment variable overrides the config seed everywhere.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import Config, preset
from .data import SyntheticClips
from .errors import DvstError
from .evaluate import (CSV_COLUMNS, ablation_run, bd_rate, cliff_experiment,
                       evaluate_model, rd_sweep, read_csv, row_to_point,
                       save_rd_plot, write_csv)
from .model import load_checkpoint
from .pipeline import run_sequence
from .training import make_schedule, resume_progressive, train_progressive
from .video_io import load_sequence


def _load_config(args) -> Config:
    cfg = preset(getattr(args, "preset", "toy"))
    if getattr(args, "config", None):
        cfg = Config(cfg.to_dict() | Config.load(args.config).to_dict())
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        current = cfg[key]
        cfg[key] = json.loads(raw) if not isinstance(current, str) else raw
    return cfg


def _dataset(cfg: Config) -> SyntheticClips:
    return SyntheticClips(num_clips=int(cfg["data.num_clips"]),
                          length=max(int(cfg["data.clip_length"]),
                                     int(cfg["train.unroll"]) + 1),
                          size=int(cfg["data.frame_size"]),
                          motion_scale=float(cfg["data.motion_scale"]),
                          seed=cfg.resolve_seed())


def _eval_clips(args, cfg: Config) -> list:
    if getattr(args, "sequences", None):
        return [load_sequence(d, max_frames=getattr(args, "max_frames", None))
                for d in args.sequences]
    eval_set = SyntheticClips(num_clips=int(getattr(args, "eval_clips", 6)),
                              length=int(cfg["gop.size"]),
                              size=int(cfg["data.frame_size"]),
                              motion_scale=float(cfg["data.motion_scale"]),
                              seed=cfg.resolve_seed() + 777)
    return [eval_set.clip_frames(i) for i in range(len(eval_set))]


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset = _dataset(cfg)
    out_dir = Path(args.out)
    if args.stage == "all":
        result = train_progressive(dataset, make_schedule(cfg), cfg,
                                   out_dir=out_dir)
    else:
        stage = int(args.stage)
        schedule = make_schedule(cfg, stages=(stage,))
        if stage == 1:
            result = train_progressive(dataset, schedule, cfg, out_dir=out_dir)
        else:
            if not args.resume:
                print("error: --resume <stage-(k-1) checkpoint> required "
                      "for a single stage > 1", file=sys.stderr)
                return 2
            result = resume_progressive(args.resume, dataset, schedule,
                                        out_dir=out_dir)
    for stage, history in result.histories.items():
        first, last = history[0].total, history[-1].total
        print(f"stage {stage}: steps={len(history)} "
              f"loss {first:.4g} -> {last:.4g}")
    for stage, path in result.checkpoints.items():
        print(f"checkpoint stage {stage}: {path}")
    return 0


def cmd_transmit(args) -> int:
    cfg = _load_config(args)
    ck = load_checkpoint(args.checkpoint)
    run_cfg = Config(ck.cfg.to_dict())
    if args.snr_db is not None:
        run_cfg["channel.snr_db"] = args.snr_db
    if args.channel:
        run_cfg["channel.kind"] = args.channel
    frames = load_sequence(args.input, max_frames=args.max_frames)
    results, summary = run_sequence(ck.model, frames, run_cfg,
                                    channel_seed=run_cfg.resolve_seed())
    rows = []
    for r in results:
        rows.append({
            "model_id": Path(args.checkpoint).stem,
            "sequence": Path(args.input).name,
            "channel_kind": run_cfg["channel.kind"],
            "snr_train_db": float(ck.cfg["train.snr_db"]),
            "snr_test_db": float(run_cfg["channel.snr_db"]),
            "gop_size": int(run_cfg["gop.size"]),
            "frames": r.frame_index,
            "lambda": float(ck.cfg["train.lambda"]),
            "metric": "psnr_db",
            "quality": r.psnr_db,
            "psnr_db": r.psnr_db,
            "msssim_db": r.msssim_db,
            "cbr": r.cbr_total,
            "cbr_primary": r.cbr_primary,
            "cbr_motion": r.cbr_motion,
            "cbr_side": r.cbr_side,
            "seed": run_cfg.resolve_seed(),
            "color_space": "rgb",
        })
    if args.out_csv:
        write_csv(rows, args.out_csv)
    print(f"frames={summary.frames} avg_cbr={summary.avg_cbr:.6g} "
          f"psnr={summary.mean_psnr_db:.3f}dB "
          f"msssim={summary.mean_msssim_db:.3f}dB")
    return 0


def cmd_sweep(args) -> int:
    channel_cfgs = [{"snr_db": s} for s in args.snr_db] or [{}]
    rows = rd_sweep(args.checkpoints, args.sequences, channel_cfgs,
                    out_csv=args.out_csv, max_frames=args.max_frames)
    if args.plot:
        save_rd_plot(rows, args.plot)
    print(f"wrote {len(rows)} rows to {args.out_csv}")
    return 0


def cmd_cliff(args) -> int:
    cfg = _load_config(args)
    ck = load_checkpoint(args.checkpoint)
    clips = _eval_clips(args, ck.cfg)
    out = cliff_experiment(ck.model, args.snr_db, args.target_cbr, clips,
                           ck.cfg, channel_seed=cfg.resolve_seed())
    write_csv([{k: r.get(k, "") for k in CSV_COLUMNS} for r in out["rows"]],
              args.out_csv)
    for row in out["rows"]:
        print(f"snr_test={row['snr_test_db']:+.1f}dB quality={row['quality']:.3f} "
              f"cbr={row['cbr']:.6g} eta_scale={row['eta_scale']:.4g}")
    print(f"finite={out['finite']} "
          f"monotone_within_tolerance={out['monotone_within_tolerance']}")
    return 0


def cmd_bdrate(args) -> int:
    anchor = [row_to_point(r) for r in read_csv(args.anchor)]
    test = [row_to_point(r) for r in read_csv(args.test)]
    value = bd_rate(anchor, test)
    print(f"bd_rate_percent={value:.4f} (anchor = 100%)")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    clips = _eval_clips(args, cfg)
    dataset = _dataset(cfg)
    rows = ablation_run(args.mode, clips, cfg, checkpoint=args.checkpoint,
                        dataset=dataset, out_dir=args.out,
                        channel_seed=cfg.resolve_seed())
    write_csv(rows, args.out_csv)
    for row in rows:
        print(f"{row['model_id']}: quality={row['quality']:.3f} "
              f"cbr={row['cbr']:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dvst",
        description="Conditional-coding video transmission over simulated "
                    "wireless channels")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file (flat dotted keys)")
        p.add_argument("--preset", default="toy", choices=["toy", "paper"])
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key")

    p = sub.add_parser("train", help="run the progressive training schedule")
    common(p)
    p.add_argument("--stage", default="all",
                   choices=["all", "1", "2", "3", "4", "5"])
    p.add_argument("--out", default="checkpoints")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transmit", help="transmit a frame directory")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="directory of PNG frames")
    p.add_argument("--snr-db", type=float, default=None)
    p.add_argument("--channel", choices=["awgn", "rayleigh_equalized"])
    p.add_argument("--max-frames", type=int, default=None)
    p.add_argument("--out-csv", default=None)
    p.set_defaults(func=cmd_transmit)

    p = sub.add_parser("sweep", help="RD sweep over models x sequences x SNRs")
    common(p)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--sequences", nargs="+", required=True)
    p.add_argument("--snr-db", type=float, nargs="*", default=[])
    p.add_argument("--max-frames", type=int, default=None)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--plot", default=None, help="optional PNG plot path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("cliff", help="quality vs test SNR at fixed CBR")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--snr-db", type=float, nargs="+", required=True)
    p.add_argument("--target-cbr", type=float, required=True)
    p.add_argument("--sequences", nargs="*", default=None)
    p.add_argument("--eval-clips", type=int, default=6)
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_cliff)

    p = sub.add_parser("bdrate", help="BD-rate of a test CSV vs an anchor CSV")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("ablate", help="run an ablation variant")
    common(p)
    p.add_argument("--mode", required=True,
                   choices=["full", "no_rate_allocation", "no_gop_training"])
    p.add_argument("--checkpoint", help="full-model or stage-4 checkpoint")
    p.add_argument("--sequences", nargs="*", default=None)
    p.add_argument("--eval-clips", type=int, default=6)
    p.add_argument("--out", default="checkpoints-ablation")
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DvstError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
