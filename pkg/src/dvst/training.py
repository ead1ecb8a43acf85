"""Progressive five-stage training with straight-through rate handling.

Stage 1 pretrains the motion-link transforms against uniform-noise
proxies; stage 2 adds the motion JSCC codec and the channel; stage 3
pretrains the primary-link transforms and feature contexts with lossless
references (bitcost terms masked during a warmup window); stage 4 trains
the primary JSCC path; stage 5 unrolls a GOP with all parameters free.
Stages 3 and 4 mix in zero-context samples so the I-frame code path is
trained too (gradients from I-frames never reach P-frame losses).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .channel import ChannelConfig
from .config import Config
from .entropy import add_uniform_noise, embedding_entropy, ste_round
from .errors import CbrUnreachable, ScheduleError
from .model import (DvstModel, capture_rng, load_checkpoint, restore_rng,
                    save_checkpoint)
from .pipeline import run_sequence, transmit_iframe
from .transform import warp
from .video_io import Frame, ms_ssim

ACTIVE_GROUPS = {
    1: ("flow", "motion_transform"),
    2: ("flow", "motion_transform", "motion_jscc"),
    3: ("primary_transform",),
    4: ("primary_transform", "primary_jscc"),
    5: ("flow", "motion_transform", "motion_jscc", "primary_transform",
        "primary_jscc"),
}
ALL_GROUPS = ACTIVE_GROUPS[5]


@dataclass
class StageConfig:
    stage: int
    lam: float
    snr_db_train: float
    steps: int
    lr: float = 1e-4
    batch: int = 2
    warmup_steps: int = 0
    unroll: int = 3

    @property
    def active_groups(self) -> tuple:
        return ACTIVE_GROUPS[self.stage]

    @property
    def frozen_sets(self) -> tuple:
        return tuple(g for g in ALL_GROUPS if g not in self.active_groups)


@dataclass
class LossReport:
    total: float
    rate_terms: dict = field(default_factory=dict)
    distortion_terms: dict = field(default_factory=dict)
    per_frame: list = field(default_factory=list)


def make_schedule(cfg: Config, stages=(1, 2, 3, 4, 5),
                  lam: float | None = None) -> list:
    lam = float(cfg["train.lambda"]) if lam is None else float(lam)
    out = []
    for s in stages:
        out.append(StageConfig(
            stage=s, lam=lam, snr_db_train=float(cfg["train.snr_db"]),
            steps=int(cfg[f"train.steps.stage{s}"]), lr=float(cfg["train.lr"]),
            batch=int(cfg["train.batch"]),
            warmup_steps=int(cfg["train.warmup_steps"]) if s == 3 else 0,
            unroll=int(cfg["train.unroll"])))
    return out


def _f(value) -> float:
    """Detached python float of a possibly-grad-tracking tensor."""
    return float(value.detach() if torch.is_tensor(value) else value)


def distortion(x_hat: torch.Tensor, x: torch.Tensor, cfg: Config) -> torch.Tensor:
    scale = float(cfg["train.distortion_scale"])
    if cfg["train.distortion"] == "msssim":
        return scale * (1.0 - ms_ssim(x_hat, x))
    return scale * F.mse_loss(x_hat, x)


def _pair(clip: torch.Tensor, rng: np.random.Generator):
    """A random adjacent (reference, current) frame pair from a clip."""
    t = int(rng.integers(1, clip.shape[0]))
    return clip[t - 1:t], clip[t:t + 1]


# ---------------------------------------------------------------------------
# stage losses
# ---------------------------------------------------------------------------

def stage1_loss(model: DvstModel, clip, lam: float, cfg: Config):
    """Motion-link pretraining on quantization proxies, no channel."""
    x_ref, x_t = clip
    motion = model.flow_net.estimate_flow(x_t, x_ref)
    y_mv = model.mv_analysis(motion)
    z_mv = model.mv_hyper_enc(y_mv)
    y_tilde = add_uniform_noise(y_mv)
    z_tilde = add_uniform_noise(z_mv)
    params = model.motion_rate_params(z_tilde, y_tilde)
    y_bits = embedding_entropy(y_tilde, params).sum()
    z_bits = model.z_density_mv.bits(z_tilde).sum()
    m_proxy = model.mv_synthesis(ste_round(y_mv))
    dist = distortion(warp(x_ref, m_proxy), x_t, cfg)
    rate_w = 1.0 if model.rate_allocation else 0.0
    loss = rate_w * lam * (y_bits + z_bits) + dist
    report = LossReport(
        total=_f(loss),
        rate_terms={"motion_bits": _f(y_bits), "hyper_bits": _f(z_bits),
                    "rate_weight": rate_w},
        distortion_terms={"proxy_warp": _f(dist)})
    return loss, report


def stage2_loss(model: DvstModel, clip, lam: float, cfg: Config,
                chan: ChannelConfig):
    """Motion transmission through the channel plus the proxy regularizer."""
    x_ref, x_t = clip
    eta_mv = float(cfg["rate.eta_mv"])
    motion = model.flow_net.estimate_flow(x_t, x_ref)
    y_mv = model.mv_analysis(motion)
    z_mv = model.mv_hyper_enc(y_mv)
    y_tilde = add_uniform_noise(y_mv)
    z_tilde = add_uniform_noise(z_mv)
    params = model.motion_rate_params(z_tilde, y_tilde)
    bits, k_cont, k_bar = model.motion_costs(y_tilde, params, eta_mv, ste=True)

    m_proxy = model.mv_synthesis(ste_round(y_mv))
    dist_proxy = distortion(warp(x_ref, m_proxy), x_t, cfg)

    stream = model.motion_encode(y_mv, k_bar)
    received = model.transmit_stream(stream, chan)
    m_hat = model.mv_synthesis(model.motion_decode(received, k_bar))
    dist_channel = distortion(warp(x_ref, m_hat), x_t, cfg)

    rate_w = 1.0 if model.rate_allocation else 0.0
    k_total = k_cont.sum()
    loss = dist_proxy + dist_channel + rate_w * lam * k_total
    report = LossReport(
        total=_f(loss),
        rate_terms={"motion_bits": _f(bits.sum()), "k_ml": _f(k_total),
                    "eta_mv": eta_mv},
        distortion_terms={"proxy_warp": _f(dist_proxy),
                          "channel_warp": _f(dist_channel)})
    return loss, report


def _lossless_reference_latent(model: DvstModel, x_ref: torch.Tensor):
    """I-frame-style latent of the lossless reference frame, detached."""
    feat_zero, _ = model.zero_contexts(x_ref.shape[-2], x_ref.shape[-1],
                                       dtype=x_ref.dtype)
    with torch.no_grad():
        return model.analysis(x_ref, feat_zero)


def _frozen_motion_roundtrip(model: DvstModel, x_t, x_ref,
                             chan: ChannelConfig | None, cfg: Config):
    """Motion link in eval form (rounded costs); used while it is frozen."""
    eta_mv = float(cfg["rate.eta_mv"])
    with torch.no_grad():
        motion = model.flow_net.estimate_flow(x_t, x_ref)
        y_mv = model.mv_analysis(motion)
        z_mv = model.mv_hyper_enc(y_mv)
        params = model.motion_rate_params(torch.round(z_mv), torch.round(y_mv))
        _, _, k_bar = model.motion_costs(torch.round(y_mv), params, eta_mv)
        stream = model.motion_encode(y_mv, k_bar)
        m_check = model.mv_synthesis(model.motion_decode(stream, k_bar))
        if chan is None:
            m_hat = m_check
        else:
            received = model.transmit_stream(stream, chan)
            m_hat = model.mv_synthesis(model.motion_decode(received, k_bar))
    return m_check, m_hat, k_bar


def stage3_loss(model: DvstModel, clip, lam: float, cfg: Config,
                warmup_flag: bool, zero_context: bool = False):
    """Primary-link transform pretraining with lossless references."""
    x_ref, x_t = clip
    if zero_context:
        feat_ctx, _ = model.zero_contexts(x_t.shape[-2], x_t.shape[-1],
                                          dtype=x_t.dtype)
    else:
        m_check, _, _ = _frozen_motion_roundtrip(model, x_t, x_ref, None, cfg)
        feat_ctx = model.ctx_feature.make_feature_context(x_ref, m_check)
    y = model.analysis(x_t, feat_ctx)
    z = model.hyper_enc(y)
    y_tilde = add_uniform_noise(y)
    z_tilde = add_uniform_noise(z)
    params = model.primary_rate_params(z_tilde, y_tilde, feat_ctx)
    y_bits = embedding_entropy(y_tilde, params).sum()
    z_bits = model.z_density.bits(z_tilde).sum()
    x_proxy = model.synthesis(ste_round(y), feat_ctx)
    dist = distortion(x_proxy, x_t, cfg)
    rate_weight = 0.0 if (warmup_flag or not model.rate_allocation) else 1.0
    loss = rate_weight * lam * (y_bits + z_bits) + dist
    report = LossReport(
        total=_f(loss),
        rate_terms={"primary_bits": _f(y_bits), "hyper_bits": _f(z_bits),
                    "rate_weight": rate_weight},
        distortion_terms={"proxy": _f(dist)})
    return loss, report


def stage4_loss(model: DvstModel, clip, lam: float, cfg: Config,
                chan: ChannelConfig, zero_context: bool = False):
    """Full primary channel path; motion link stays frozen."""
    x_ref, x_t = clip
    eta = float(cfg["rate.eta"])
    if zero_context:
        feat_tx, code_tx = model.zero_contexts(x_t.shape[-2], x_t.shape[-1],
                                               dtype=x_t.dtype)
        feat_rx, code_rx = feat_tx, code_tx
    else:
        y_ref = _lossless_reference_latent(model, x_ref)
        m_check, m_hat, _ = _frozen_motion_roundtrip(model, x_t, x_ref, chan, cfg)
        feat_tx, code_tx = model.contexts_from(x_ref, y_ref, m_check)
        feat_rx, code_rx = model.contexts_from(x_ref, y_ref, m_hat)
    y = model.analysis(x_t, feat_tx)
    z = model.hyper_enc(y)
    y_tilde = add_uniform_noise(y)
    z_tilde = add_uniform_noise(z)
    params = model.primary_rate_params(z_tilde, y_tilde, feat_tx)
    bits, k_cont, k_bar = model.primary_costs(y_tilde, params, eta, ste=True)

    stream = model.primary_encode(y, code_tx, k_bar)
    received = model.transmit_stream(stream, chan)
    y_hat = model.primary_decode(received, code_rx, k_bar)
    x_hat = model.synthesis(y_hat, feat_rx)
    x_proxy = model.synthesis(ste_round(y), feat_rx)

    dist_proxy = distortion(x_proxy, x_t, cfg)
    dist_channel = distortion(x_hat, x_t, cfg)
    rate_w = 1.0 if model.rate_allocation else 0.0
    k_total = k_cont.sum()
    loss = dist_proxy + dist_channel + rate_w * lam * k_total
    report = LossReport(
        total=_f(loss),
        rate_terms={"primary_bits": _f(bits.sum()), "k_pl": _f(k_total),
                    "eta": eta},
        distortion_terms={"proxy": _f(dist_proxy),
                          "channel": _f(dist_channel)})
    return loss, report


def _pframe_training_step(model: DvstModel, x_t, tx_refs, rx_refs,
                          cfg: Config, chan: ChannelConfig):
    """One unrolled P-frame with gradients; returns losses and new states."""
    x_check, y_check = tx_refs
    x_hat_prev, y_hat_prev = rx_refs
    eta = float(cfg["rate.eta"])
    eta_mv = float(cfg["rate.eta_mv"])

    motion = model.flow_net.estimate_flow(x_t, x_check)
    y_mv = model.mv_analysis(motion)
    z_mv = model.mv_hyper_enc(y_mv)
    y_mv_tilde = add_uniform_noise(y_mv)
    z_mv_tilde = add_uniform_noise(z_mv)
    params_mv = model.motion_rate_params(z_mv_tilde, y_mv_tilde)
    _, k_ml_cont, k_bar_mv = model.motion_costs(y_mv_tilde, params_mv,
                                                eta_mv, ste=True)
    stream_mv = model.motion_encode(y_mv, k_bar_mv)
    received_mv = model.transmit_stream(stream_mv, chan)
    m_hat = model.mv_synthesis(model.motion_decode(received_mv, k_bar_mv))
    m_check = model.mv_synthesis(model.motion_decode(stream_mv, k_bar_mv))

    feat_tx, code_tx = model.contexts_from(x_check, y_check, m_check)
    feat_rx, code_rx = model.contexts_from(x_hat_prev, y_hat_prev, m_hat)

    y = model.analysis(x_t, feat_tx)
    z = model.hyper_enc(y)
    y_tilde = add_uniform_noise(y)
    z_tilde = add_uniform_noise(z)
    params = model.primary_rate_params(z_tilde, y_tilde, feat_tx)
    _, k_pl_cont, k_bar = model.primary_costs(y_tilde, params, eta, ste=True)

    stream = model.primary_encode(y, code_tx, k_bar)
    received = model.transmit_stream(stream, chan)
    y_hat = model.primary_decode(received, code_rx, k_bar)
    x_hat = model.synthesis(y_hat, feat_rx)
    x_proxy = model.synthesis(ste_round(y), feat_rx)

    y_check_new = model.primary_decode(stream, code_tx, k_bar)
    x_check_new = model.synthesis(y_check_new, feat_tx)
    return {
        "k_pl": k_pl_cont.sum(),
        "k_ml": k_ml_cont.sum(),
        "x_hat": x_hat,
        "x_proxy": x_proxy,
        "tx_refs": (x_check_new, y_check_new),
        "rx_refs": (x_hat, y_hat),
    }


def stage5_loss(model: DvstModel, gop_clip: torch.Tensor, lam: float,
                cfg: Config, chan: ChannelConfig, unroll: int | None = None):
    """GOP-unrolled loss; I-frame coded without gradients, states carried."""
    n_pframes = (unroll or gop_clip.shape[0] - 1)
    n_pframes = min(n_pframes, gop_clip.shape[0] - 1)
    if n_pframes < 1:
        raise ScheduleError("stage 5 needs at least one P-frame to unroll")
    with torch.no_grad():
        iframe = Frame(gop_clip[0].permute(1, 2, 0).numpy())
        _, tx, rx = transmit_iframe(model, iframe, cfg, chan)
    tx_refs = (tx.x_check, tx.y_check)
    rx_refs = (rx.x_hat_prev, rx.y_hat_prev)

    total = None
    per_frame = []
    rate_terms = {"k_pl": 0.0, "k_ml": 0.0}
    dist_terms = {"channel": 0.0, "proxy": 0.0}
    rate_w = 1.0 if model.rate_allocation else 0.0
    for t in range(1, n_pframes + 1):
        x_t = gop_clip[t:t + 1]
        out = _pframe_training_step(model, x_t, tx_refs, rx_refs, cfg, chan)
        d_channel = distortion(out["x_hat"], x_t, cfg)
        d_proxy = distortion(out["x_proxy"], x_t, cfg)
        frame_loss = rate_w * lam * (out["k_pl"] + out["k_ml"]) + d_channel + d_proxy
        total = frame_loss if total is None else total + frame_loss
        tx_refs, rx_refs = out["tx_refs"], out["rx_refs"]
        per_frame.append({
            "t": t, "loss": _f(frame_loss),
            "k_pl": _f(out["k_pl"]), "k_ml": _f(out["k_ml"]),
            "channel": _f(d_channel), "proxy": _f(d_proxy)})
        rate_terms["k_pl"] += _f(out["k_pl"])
        rate_terms["k_ml"] += _f(out["k_ml"])
        dist_terms["channel"] += _f(d_channel)
        dist_terms["proxy"] += _f(d_proxy)
    loss = total / n_pframes
    report = LossReport(total=_f(loss), rate_terms=rate_terms,
                        distortion_terms=dist_terms, per_frame=per_frame)
    return loss, report


# ---------------------------------------------------------------------------
# flow pretraining
# ---------------------------------------------------------------------------

def flow_pretrain(model: DvstModel, dataset, steps: int, cfg: Config,
                  seed: int, lr: float = 2e-3, batch: int = 2,
                  max_shift: int = 3) -> list:
    """Fit the flow net on synthetic integer translations.

    Supervised constant-field targets plus a photometric warp term; the
    photometric side gives informative gradients on textured regions long
    before the supervised field converges.
    """
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    model.set_trainable(("flow",))
    params = list(model.flow_net.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1))
    history = []
    from .data import shift_frame
    for _ in range(steps):
        opt.zero_grad()
        loss = 0.0
        for _ in range(batch):
            clip = dataset.clip_tensor(int(rng.integers(len(dataset))))
            x_ref = clip[:1]
            dx = int(rng.integers(-max_shift, max_shift + 1))
            dy = int(rng.integers(-max_shift, max_shift + 1))
            x_t = shift_frame(x_ref, dx, dy)
            target = torch.tensor([-dx, -dy], dtype=x_ref.dtype)
            target = target.view(1, 2, 1, 1).expand(1, 2, *x_ref.shape[-2:])
            flow = model.flow_net.estimate_flow(x_t, x_ref)
            loss = loss + F.mse_loss(flow, target) \
                + 10.0 * F.mse_loss(warp(x_ref, flow), x_t)
        loss = loss / batch
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 5.0)
        opt.step()
        sched.step()
        history.append(_f(loss))
    return history


# ---------------------------------------------------------------------------
# the progressive driver
# ---------------------------------------------------------------------------

def _stage_step(model, stage_cfg: StageConfig, dataset, cfg, chan, rng,
                step_index: int):
    """One optimizer step: average the stage loss over a mini-batch."""
    s = stage_cfg.stage
    reports = []
    loss_sum = None
    for _ in range(stage_cfg.batch):
        clip = dataset.clip_tensor(int(rng.integers(len(dataset))))
        if s == 5:
            loss, rep = stage5_loss(model, clip, stage_cfg.lam, cfg, chan,
                                    unroll=stage_cfg.unroll)
        else:
            pair = _pair(clip, rng)
            if s == 1:
                loss, rep = stage1_loss(model, pair, stage_cfg.lam, cfg)
            elif s == 2:
                loss, rep = stage2_loss(model, pair, stage_cfg.lam, cfg, chan)
            elif s == 3:
                warmup = step_index < stage_cfg.warmup_steps
                zero_ctx = bool(rng.random() < float(cfg["train.iframe_mix"]))
                loss, rep = stage3_loss(model, pair, stage_cfg.lam, cfg,
                                        warmup_flag=warmup,
                                        zero_context=zero_ctx)
            else:
                zero_ctx = bool(rng.random() < float(cfg["train.iframe_mix_stage4"]))
                loss, rep = stage4_loss(model, pair, stage_cfg.lam, cfg, chan,
                                        zero_context=zero_ctx)
        loss_sum = loss if loss_sum is None else loss_sum + loss
        reports.append(rep)
    return loss_sum / stage_cfg.batch, reports


def run_stage(model: DvstModel, stage_cfg: StageConfig, dataset, cfg: Config,
              seed: int) -> list:
    """Train one stage; returns its LossReports in step order."""
    torch.manual_seed(seed * 10_007 + stage_cfg.stage)
    rng = np.random.default_rng((seed, stage_cfg.stage))
    chan = ChannelConfig(kind=cfg["channel.kind"],
                         snr_db=stage_cfg.snr_db_train, seed=None)
    model.train()
    model.set_trainable(stage_cfg.active_groups)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=stage_cfg.lr)
    history = []
    for step in range(stage_cfg.steps):
        opt.zero_grad()
        loss, reports = _stage_step(model, stage_cfg, dataset, cfg, chan,
                                    rng, step)
        loss.backward()
        # rate gradients scale like 1/sigma; clipping keeps the race between
        # shrinking sigma and spreading latents from diverging
        torch.nn.utils.clip_grad_norm_(params, 5.0)
        opt.step()
        history.extend(reports)
    model.eval()
    return history


@dataclass
class TrainResult:
    model: DvstModel
    histories: dict
    checkpoints: dict


def train_progressive(dataset, schedule: list, cfg: Config,
                      model: DvstModel | None = None,
                      out_dir=None, start_stage: int | None = None) -> TrainResult:
    """Run schedule stages in order, persisting a checkpoint per stage."""
    stages = [s.stage for s in schedule]
    if stages != sorted(stages) or len(set(stages)) != len(stages):
        raise ScheduleError(f"stages out of order: {stages}")
    if any(s < 1 or s > 5 for s in stages):
        raise ScheduleError(f"stages must lie in 1..5: {stages}")
    expected = start_stage if start_stage is not None else stages[0]
    if stages[0] != expected:
        raise ScheduleError(
            f"schedule starts at stage {stages[0]}, expected {expected}")
    for a, b in zip(stages, stages[1:]):
        if b != a + 1:
            raise ScheduleError(f"non-consecutive stages: {stages}")

    seed = cfg.resolve_seed()
    if model is None:
        torch.manual_seed(seed)
        model = DvstModel(cfg)
    if stages[0] == 1 and int(cfg["train.steps.flow"]) > 0:
        flow_pretrain(model, dataset, int(cfg["train.steps.flow"]), cfg,
                      seed=seed * 31 + 1, lr=float(cfg["train.lr"]) * 10,
                      batch=int(cfg["train.batch"]))

    histories = {}
    checkpoints = {}
    out_dir = Path(out_dir) if out_dir is not None else None
    for stage_cfg in schedule:
        histories[stage_cfg.stage] = run_stage(model, stage_cfg, dataset,
                                               cfg, seed)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            path = out_dir / f"stage{stage_cfg.stage}.pt"
            save_checkpoint(model, cfg, stage_cfg.stage, path,
                            rng=capture_rng())
            checkpoints[stage_cfg.stage] = path
    return TrainResult(model=model, histories=histories, checkpoints=checkpoints)


def resume_progressive(checkpoint_path, dataset, schedule: list,
                       out_dir=None) -> TrainResult:
    """Continue training from a stage checkpoint (next stage onward)."""
    ck = load_checkpoint(checkpoint_path)
    if ck.rng:
        restore_rng(ck.rng)
    return train_progressive(dataset, schedule, ck.cfg, model=ck.model,
                             out_dir=out_dir, start_stage=ck.stage + 1)


# ---------------------------------------------------------------------------
# eta fine-tuning for CBR targeting
# ---------------------------------------------------------------------------

def measure_cbr(model: DvstModel, clips: list, cfg: Config, snr_db: float,
                eta_scale: float, channel_seed: int = 0) -> float:
    run_cfg = cfg.copy()
    run_cfg["channel.snr_db"] = float(snr_db)
    total, count = 0.0, 0
    for frames in clips:
        _, summary = run_sequence(model, frames, run_cfg,
                                  channel_seed=channel_seed,
                                  eta_scale=eta_scale)
        total += summary.avg_cbr * summary.frames
        count += summary.frames
    return total / count


def finetune_eta(model: DvstModel, target_cbr: float, snr_db: float,
                 clips: list, cfg: Config, tolerance: float = 0.05,
                 max_iters: int = 25, channel_seed: int = 0) -> float:
    """Bisection on a global eta multiplier until CBR is within tolerance.

    Raises CbrUnreachable when the target is below the side-information
    floor or above what saturated value sets can spend.
    """

    def measure(mult):
        return measure_cbr(model, clips, cfg, snr_db, mult, channel_seed)

    lo, hi = 1e-4, 1.0
    cbr_floor = measure(lo)
    if target_cbr <= cbr_floor * (1 - tolerance):
        raise CbrUnreachable(
            f"target {target_cbr:.6g} below floor {cbr_floor:.6g}")
    cbr_hi = measure(hi)
    while cbr_hi < target_cbr and hi < 1e4:
        hi *= 4.0
        cbr_hi = measure(hi)
    if cbr_hi < target_cbr * (1 - tolerance):
        raise CbrUnreachable(
            f"target {target_cbr:.6g} above ceiling {cbr_hi:.6g}")

    best_mult, best_err = hi, abs(cbr_hi - target_cbr)
    for _ in range(max_iters):
        mid = math.sqrt(lo * hi)
        cbr = measure(mid)
        err = abs(cbr - target_cbr)
        if err < best_err:
            best_mult, best_err = mid, err
        if err <= tolerance * target_cbr:
            return mid
        if cbr < target_cbr:
            lo = mid
        else:
            hi = mid
    return best_mult
