"""Experiment orchestration: RD sweeps, cliff runs, ablations, BD-rate.

Every figure-producing command emits the underlying CSV; plots are
derived artifacts. CSV column set and order are fixed (golden-tested).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

from .config import Config
from .errors import NoOverlap, ScheduleError
from .model import DvstModel, load_checkpoint
from .pipeline import run_sequence
from .training import (StageConfig, finetune_eta, make_schedule,
                       train_progressive)
from .video_io import load_sequence

CSV_COLUMNS = [
    "model_id", "sequence", "channel_kind", "snr_train_db", "snr_test_db",
    "gop_size", "frames", "lambda", "metric", "quality", "psnr_db",
    "msssim_db", "cbr", "cbr_primary", "cbr_motion", "cbr_side", "seed",
    "color_space",
]


@dataclass
class RdPoint:
    cbr: float
    quality: float
    metric: str
    snr_train: float
    snr_test: float
    model_id: str


def as_curve(points: list) -> list:
    """Sort by CBR and validate a usable rate-distortion curve."""
    curve = sorted(points, key=lambda p: p.cbr)
    if len({p.metric for p in curve}) > 1:
        raise ValueError("mixed metrics within one curve")
    cbrs = [p.cbr for p in curve]
    if any(b <= a for a, b in zip(cbrs, cbrs[1:])):
        raise ValueError("curve CBRs must be strictly increasing")
    if curve and curve[0].cbr <= 0:
        raise ValueError("CBR must be positive")
    return curve


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(rows: list, path) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        lines.append(",".join(_format(row[c]) for c in CSV_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path) -> list:
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    header = text[0].split(",")
    rows = []
    for line in text[1:]:
        rows.append(dict(zip(header, line.split(","))))
    return rows


def evaluate_model(model: DvstModel, clips: list, cfg: Config,
                   model_id: str = "model", sequence: str = "clips",
                   snr_test: float | None = None, eta_scale: float = 1.0,
                   channel_seed: int | None = None) -> dict:
    """One sweep cell: average CBR and quality of a model on a clip list."""
    run_cfg = cfg.copy()
    if snr_test is not None:
        run_cfg["channel.snr_db"] = float(snr_test)
    agg = {"cbr": 0.0, "cbr_primary": 0.0, "cbr_motion": 0.0,
           "cbr_side": 0.0, "psnr_db": 0.0, "msssim_db": 0.0, "frames": 0}
    for frames in clips:
        _, summary = run_sequence(model, frames, run_cfg,
                                  channel_seed=channel_seed,
                                  eta_scale=eta_scale)
        n = summary.frames
        agg["cbr"] += summary.avg_cbr * n
        agg["cbr_primary"] += summary.avg_cbr_primary * n
        agg["cbr_motion"] += summary.avg_cbr_motion * n
        agg["cbr_side"] += summary.avg_cbr_side * n
        agg["psnr_db"] += summary.mean_psnr_db * n
        agg["msssim_db"] += summary.mean_msssim_db * n
        agg["frames"] += n
    n = agg.pop("frames")
    agg = {k: v / n for k, v in agg.items()}
    metric = "psnr_db" if cfg["train.distortion"] == "mse" else "msssim_db"
    return {
        "model_id": model_id,
        "sequence": sequence,
        "channel_kind": run_cfg["channel.kind"],
        "snr_train_db": float(cfg["train.snr_db"]),
        "snr_test_db": float(run_cfg["channel.snr_db"]),
        "gop_size": int(cfg["gop.size"]),
        "frames": n,
        "lambda": float(cfg["train.lambda"]),
        "metric": metric,
        "quality": agg[metric],
        "psnr_db": agg["psnr_db"],
        "msssim_db": agg["msssim_db"],
        "cbr": agg["cbr"],
        "cbr_primary": agg["cbr_primary"],
        "cbr_motion": agg["cbr_motion"],
        "cbr_side": agg["cbr_side"],
        "seed": cfg.resolve_seed(),
        "color_space": "rgb",
    }


def rd_sweep(checkpoint_paths: list, sequence_dirs: list, channel_cfgs: list,
             out_csv=None, max_frames: int | None = None) -> list:
    """One row per (model, sequence, channel); deterministic under seeds."""
    rows = []
    for ck_path in checkpoint_paths:
        ck = load_checkpoint(ck_path)
        for seq_dir in sequence_dirs:
            frames = load_sequence(seq_dir, max_frames=max_frames)
            for chan in channel_cfgs:
                cfg = ck.cfg.copy()
                cfg["channel.kind"] = chan.get("kind", cfg["channel.kind"])
                rows.append(evaluate_model(
                    ck.model, [frames], cfg,
                    model_id=Path(ck_path).stem,
                    sequence=Path(seq_dir).name,
                    snr_test=chan.get("snr_db", cfg["channel.snr_db"]),
                    channel_seed=cfg.resolve_seed()))
    if out_csv is not None:
        write_csv(rows, out_csv)
    return rows


def row_to_point(row: dict) -> RdPoint:
    return RdPoint(cbr=float(row["cbr"]), quality=float(row["quality"]),
                   metric=str(row["metric"]),
                   snr_train=float(row["snr_train_db"]),
                   snr_test=float(row["snr_test_db"]),
                   model_id=str(row["model_id"]))


def bd_rate(anchor: list, test: list) -> float:
    """Average percent bandwidth change of test vs anchor at equal quality.

    Piecewise-cubic (PCHIP) fit of log10(cbr) against quality, integrated
    over the common quality interval. Negative means the test curve saves
    bandwidth.
    """
    for name, points in (("anchor", anchor), ("test", test)):
        if len(points) < 4:
            raise ValueError(f"{name} curve needs >= 4 points, got {len(points)}")
    anchor = as_curve(anchor)
    test = as_curve(test)
    aq = np.array([p.quality for p in anchor])
    ar = np.log10([p.cbr for p in anchor])
    tq = np.array([p.quality for p in test])
    tr = np.log10([p.cbr for p in test])
    if np.any(np.diff(aq) <= 0) or np.any(np.diff(tq) <= 0):
        raise ValueError("curves must be strictly monotone in quality")
    lo = max(aq.min(), tq.min())
    hi = min(aq.max(), tq.max())
    if not hi > lo:
        raise NoOverlap(f"no common quality range: [{lo}, {hi}]")
    a_int = PchipInterpolator(aq, ar).antiderivative()
    t_int = PchipInterpolator(tq, tr).antiderivative()
    avg_diff = ((t_int(hi) - t_int(lo)) - (a_int(hi) - a_int(lo))) / (hi - lo)
    return float((10.0 ** avg_diff - 1.0) * 100.0)


def cliff_experiment(model: DvstModel, snr_test_list: list, cbr_target: float,
                     clips: list, cfg: Config, channel_seed: int = 0,
                     tolerance_db: float = 0.2) -> dict:
    """Quality vs test SNR at a fixed CBR budget (eta re-tuned per SNR).

    The same channel seed is reused across SNR points (common random
    numbers), and graceful degradation is recorded, not enforced.
    """
    rows = []
    for snr_test in snr_test_list:
        mult = finetune_eta(model, cbr_target, snr_test, clips, cfg,
                            channel_seed=channel_seed)
        cell = evaluate_model(model, clips, cfg, model_id="cliff",
                              snr_test=snr_test, eta_scale=mult,
                              channel_seed=channel_seed)
        cell["eta_scale"] = mult
        rows.append(cell)
    qualities = [r["quality"] for r in rows]
    finite = all(math.isfinite(q) for q in qualities)
    monotone = all(qualities[i + 1] >= qualities[i] - tolerance_db
                   for i in range(len(qualities) - 1))
    return {"rows": rows, "finite": finite,
            "monotone_within_tolerance": monotone}


def matched_constant_costs(model: DvstModel, clips: list, cfg: Config,
                           channel_seed: int = 0) -> tuple[int, int]:
    """Constant per-embedding costs matching a trained model's budget.

    The motion link gets the 1/3 share of the total symbol budget; each
    share is spread uniformly over the embeddings and snapped to the
    nearest value-set entry.
    """
    total_sym = 0.0
    n_frames = 0
    n_emb = None
    for frames in clips:
        results, _ = run_sequence(model, frames, cfg, channel_seed=channel_seed)
        for r in results:
            total_sym += r.k_primary + r.k_motion
            n_frames += 1
        h = frames[0].height // 32
        w = frames[0].width // 32
        n_emb = h * w
    per_frame = total_sym / max(n_frames, 1)
    from .jscc import quantize_rate
    import torch
    k_pl = quantize_rate(torch.tensor(2.0 * per_frame / 3.0 / n_emb),
                         model.v_pl).item()
    k_ml = quantize_rate(torch.tensor(per_frame / 3.0 / n_emb),
                         model.v_ml).item()
    return int(k_pl), int(k_ml)


def train_no_rate_variant(dataset, cfg: Config, fixed_k_pl: int,
                          fixed_k_ml: int, out_dir=None,
                          schedule: list | None = None):
    """Train the w/o-rate-allocation ablation: constant costs, no tokens,
    distortion-only losses."""
    ab_cfg = cfg.copy()
    ab_cfg["ablation.fixed_k_pl"] = int(fixed_k_pl)
    ab_cfg["ablation.fixed_k_ml"] = int(fixed_k_ml)
    import torch
    torch.manual_seed(ab_cfg.resolve_seed())
    model = DvstModel(ab_cfg)
    model.rate_allocation = False
    schedule = schedule or make_schedule(ab_cfg)
    result = train_progressive(dataset, schedule, ab_cfg, model=model,
                               out_dir=out_dir)
    return result


def train_no_gop_variant(stage4_checkpoint, dataset, out_dir=None):
    """Retrain stage 5 with a single-frame unroll (w/o GOP training)."""
    ck = load_checkpoint(stage4_checkpoint)
    if ck.stage != 4:
        raise ScheduleError(f"need a stage-4 checkpoint, got stage {ck.stage}")
    cfg = ck.cfg
    stage5 = StageConfig(stage=5, lam=float(cfg["train.lambda"]),
                         snr_db_train=float(cfg["train.snr_db"]),
                         steps=int(cfg["train.steps.stage5"]),
                         lr=float(cfg["train.lr"]),
                         batch=int(cfg["train.batch"]), unroll=1)
    return train_progressive(dataset, [stage5], cfg, model=ck.model,
                             out_dir=out_dir, start_stage=5)


def ablation_run(mode: str, clips: list, cfg: Config,
                 checkpoint=None, dataset=None, out_dir=None,
                 channel_seed: int = 0) -> list:
    """Evaluate an ablation mode; returns sweep rows (RdPoint-compatible).

    ``full`` evaluates the given checkpoint. ``no_rate_allocation`` trains
    the constant-cost variant matched to the full model's budget, then
    evaluates it. ``no_gop_training`` retrains stage 5 with unroll 1 from
    a stage-4 checkpoint and evaluates with the configured GOP size.
    """
    if mode == "full":
        ck = load_checkpoint(checkpoint)
        return [evaluate_model(ck.model, clips, ck.cfg, model_id="full",
                               channel_seed=channel_seed)]
    if mode == "no_rate_allocation":
        ck = load_checkpoint(checkpoint)
        k_pl, k_ml = matched_constant_costs(ck.model, clips, ck.cfg,
                                            channel_seed=channel_seed)
        result = train_no_rate_variant(dataset, ck.cfg, k_pl, k_ml,
                                       out_dir=out_dir)
        return [evaluate_model(result.model, clips, ck.cfg,
                               model_id="no_rate_allocation",
                               channel_seed=channel_seed)]
    if mode == "no_gop_training":
        result = train_no_gop_variant(checkpoint, dataset, out_dir=out_dir)
        return [evaluate_model(result.model, clips, result.model.cfg,
                               model_id="no_gop_training",
                               channel_seed=channel_seed)]
    raise ValueError(f"unknown ablation mode {mode!r}")


def save_rd_plot(rows: list, out_png) -> None:
    """Optional plot of the sweep rows; the CSV stays the primary output."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    by_model: dict = {}
    for row in rows:
        by_model.setdefault(row["model_id"], []).append(row)
    for model_id, cells in sorted(by_model.items()):
        cells = sorted(cells, key=lambda r: float(r["cbr"]))
        ax.plot([float(r["cbr"]) for r in cells],
                [float(r["quality"]) for r in cells],
                marker="o", label=model_id)
    ax.set_xlabel("channel bandwidth ratio")
    ax.set_ylabel(rows[0]["metric"] if rows else "quality")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
