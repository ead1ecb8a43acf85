"""Per-frame transmission: motion link, contexts, primary link, state.

The transmitter keeps references produced by noiseless decode simulation;
the receiver keeps references decoded from channel-corrupted streams.
With the noiseless channel sentinel both paths are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .channel import ChannelConfig, SymbolStream, transmit
from .config import Config
from .errors import DvstError, StateNotInitialized
from .jscc import cbr_components, side_info_bits
from .model import DvstModel
from .video_io import Frame, ms_ssim_db, partition_gops, psnr


@dataclass
class TxState:
    """Transmitter references from noiseless decode simulation."""

    x_check: torch.Tensor
    y_check: torch.Tensor
    m_check: torch.Tensor | None = None


@dataclass
class RxState:
    """Receiver references decoded from channel-corrupted streams."""

    x_hat_prev: torch.Tensor
    y_hat_prev: torch.Tensor
    m_hat_prev: torch.Tensor | None = None


@dataclass
class FrameResult:
    frame_index: int
    is_iframe: bool
    x_hat: Frame
    cbr_primary: float
    cbr_motion: float
    cbr_side: float
    psnr_db: float
    msssim_db: float
    k_primary: int = 0
    k_motion: int = 0
    side_bits: int = 0

    @property
    def cbr_total(self) -> float:
        return self.cbr_primary + self.cbr_motion + self.cbr_side


def _through_channel(stream: SymbolStream, chan: ChannelConfig,
                     generator) -> SymbolStream:
    """Channel pass; pads one zero symbol for odd streams under Rayleigh."""
    if len(stream) == 0 or chan.noiseless:
        return transmit(stream, chan, generator=generator)
    if chan.kind == "rayleigh_equalized" and len(stream) % 2:
        padded = SymbolStream(
            torch.cat([stream.values, stream.values.new_zeros(1)]),
            torch.cat([stream.segment_lengths,
                       stream.segment_lengths.new_ones(1)]),
            norm_scale=stream.norm_scale)
        out = transmit(padded, chan, generator=generator)
        return SymbolStream(out.values[:-1], stream.segment_lengths,
                            norm_scale=out.norm_scale)
    return transmit(stream, chan, generator=generator)


def _metrics(x_hat: torch.Tensor, source: Frame) -> tuple[Frame, float, float]:
    recon = Frame.from_tensor(x_hat, content_hw=source.content_hw)
    return recon, psnr(source, recon), ms_ssim_db(source, recon)


@torch.no_grad()
def transmit_iframe(model: DvstModel, source: Frame, cfg: Config,
                    chan: ChannelConfig, generator=None):
    """Code the first frame of a GOP with zero contexts and no motion link."""
    x = source.to_tensor()
    _, _, height, width = x.shape
    feat_zero, code_zero = model.zero_contexts(height, width, dtype=x.dtype)

    eta = float(cfg["rate.eta"])
    y = model.analysis(x, feat_zero)
    z = model.hyper_enc(y)
    y_bar, z_bar = torch.round(y), torch.round(z)
    params = model.primary_rate_params(z_bar, y_bar, feat_zero)
    _, _, k_bar = model.primary_costs(y_bar, params, eta)

    stream = model.primary_encode(y, code_zero, k_bar)
    received = _through_channel(stream, chan, generator)
    y_hat = model.primary_decode(received, code_zero, k_bar)
    x_hat = model.synthesis(y_hat, feat_zero)
    y_check = model.primary_decode(stream, code_zero, k_bar)
    x_check = model.synthesis(y_check, feat_zero)

    side_bits = side_info_bits(k_bar.numel(), model.v_pl)
    parts = cbr_components(k_bar, None, side_bits, 3 * height * width,
                           chan.snr_db, include_side=cfg["rate.count_side_info"])
    recon, psnr_db, ms_db = _metrics(x_hat, source)
    result = FrameResult(
        frame_index=0, is_iframe=True, x_hat=recon,
        cbr_primary=parts[0], cbr_motion=parts[1], cbr_side=parts[2],
        psnr_db=psnr_db, msssim_db=ms_db,
        k_primary=int(k_bar.sum()), k_motion=0, side_bits=side_bits)
    tx = TxState(x_check=x_check, y_check=y_check)
    rx = RxState(x_hat_prev=x_hat, y_hat_prev=y_hat)
    return result, tx, rx


@torch.no_grad()
def transmit_pframe(model: DvstModel, source: Frame, tx: TxState, rx: RxState,
                    cfg: Config, chan: ChannelConfig, generator=None,
                    frame_index: int = 0):
    """Motion link, context generation, primary link, state update."""
    if tx is None or rx is None:
        raise StateNotInitialized("transmit an I-frame before P-frames")
    x = source.to_tensor()
    _, _, height, width = x.shape
    eta = float(cfg["rate.eta"])
    eta_mv = float(cfg["rate.eta_mv"])

    # (a) motion estimation against the Tx reference
    motion = model.flow_net.estimate_flow(x, tx.x_check)

    # (b) motion link: channel decode at Rx, noiseless decode at Tx
    y_mv = model.mv_analysis(motion)
    z_mv = model.mv_hyper_enc(y_mv)
    y_mv_bar, z_mv_bar = torch.round(y_mv), torch.round(z_mv)
    params_mv = model.motion_rate_params(z_mv_bar, y_mv_bar)
    _, _, k_bar_mv = model.motion_costs(y_mv_bar, params_mv, eta_mv)
    stream_mv = model.motion_encode(y_mv, k_bar_mv)
    received_mv = _through_channel(stream_mv, chan, generator)
    m_hat = model.mv_synthesis(model.motion_decode(received_mv, k_bar_mv))
    m_check = model.mv_synthesis(model.motion_decode(stream_mv, k_bar_mv))

    # (c) contexts on both ends
    feat_tx, code_tx = model.contexts_from(tx.x_check, tx.y_check, m_check)
    feat_rx, code_rx = model.contexts_from(rx.x_hat_prev, rx.y_hat_prev, m_hat)

    # (d) analysis + entropy-driven rate allocation
    y = model.analysis(x, feat_tx)
    z = model.hyper_enc(y)
    y_bar, z_bar = torch.round(y), torch.round(z)
    params = model.primary_rate_params(z_bar, y_bar, feat_tx)
    _, _, k_bar = model.primary_costs(y_bar, params, eta)

    # (e) primary link
    stream = model.primary_encode(y, code_tx, k_bar)
    received = _through_channel(stream, chan, generator)
    y_hat = model.primary_decode(received, code_rx, k_bar)
    x_hat = model.synthesis(y_hat, feat_rx)

    # (f) noiseless Tx reference update
    y_check = model.primary_decode(stream, code_tx, k_bar)
    x_check = model.synthesis(y_check, feat_tx)

    # (g) metrics and bandwidth accounting
    side_bits = (side_info_bits(k_bar.numel(), model.v_pl)
                 + side_info_bits(k_bar_mv.numel(), model.v_ml))
    parts = cbr_components(k_bar, k_bar_mv, side_bits, 3 * height * width,
                           chan.snr_db, include_side=cfg["rate.count_side_info"])
    recon, psnr_db, ms_db = _metrics(x_hat, source)
    result = FrameResult(
        frame_index=frame_index, is_iframe=False, x_hat=recon,
        cbr_primary=parts[0], cbr_motion=parts[1], cbr_side=parts[2],
        psnr_db=psnr_db, msssim_db=ms_db,
        k_primary=int(k_bar.sum()), k_motion=int(k_bar_mv.sum()),
        side_bits=side_bits)
    tx_next = TxState(x_check=x_check, y_check=y_check, m_check=m_check)
    rx_next = RxState(x_hat_prev=x_hat, y_hat_prev=y_hat, m_hat_prev=m_hat)
    return result, tx_next, rx_next


@dataclass
class SequenceSummary:
    avg_cbr: float
    avg_cbr_primary: float
    avg_cbr_motion: float
    avg_cbr_side: float
    mean_psnr_db: float
    mean_msssim_db: float
    frames: int
    color_space: str = "rgb"


def run_sequence(model: DvstModel, frames: list, cfg: Config,
                 gop_size: int | None = None, channel_seed: int | None = None,
                 eta_scale: float = 1.0):
    """Transmit a frame list GOP by GOP; states reset at each boundary.

    The summary CBR is the arithmetic mean of per-frame symbol-per-dim
    ratios, I-frames included.
    """
    if not frames:
        raise StateNotInitialized("empty frame list")
    gop_size = gop_size or int(cfg["gop.size"])
    chan = ChannelConfig(kind=cfg["channel.kind"],
                         snr_db=float(cfg["channel.snr_db"]),
                         seed=cfg["channel.seed"])
    if channel_seed is None:
        channel_seed = cfg.resolve_seed()
    run_cfg = cfg
    if eta_scale != 1.0:
        run_cfg = cfg.copy()
        run_cfg["rate.eta"] = float(cfg["rate.eta"]) * eta_scale
        run_cfg["rate.eta_mv"] = float(cfg["rate.eta_mv"]) * eta_scale

    results: list[FrameResult] = []
    model.eval()
    with torch.no_grad():
        index = 0
        for gop in partition_gops(frames, gop_size):
            tx = rx = None
            for t, frame in enumerate(gop.frames):
                gen = torch.Generator()
                gen.manual_seed((channel_seed * 1_000_003 + index) % (2 ** 62))
                try:
                    if t == gop.i_frame_index:
                        res, tx, rx = transmit_iframe(model, frame, run_cfg,
                                                      chan, generator=gen)
                    else:
                        res, tx, rx = transmit_pframe(model, frame, tx, rx,
                                                      run_cfg, chan,
                                                      generator=gen,
                                                      frame_index=t)
                except DvstError as exc:
                    raise type(exc)(f"frame {index}: {exc}") from exc
                res.frame_index = index
                results.append(res)
                index += 1
    summary = SequenceSummary(
        avg_cbr=sum(r.cbr_total for r in results) / len(results),
        avg_cbr_primary=sum(r.cbr_primary for r in results) / len(results),
        avg_cbr_motion=sum(r.cbr_motion for r in results) / len(results),
        avg_cbr_side=sum(r.cbr_side for r in results) / len(results),
        mean_psnr_db=sum(r.psnr_db for r in results) / len(results),
        mean_msssim_db=sum(r.msssim_db for r in results) / len(results),
        frames=len(results))
    return results, summary
