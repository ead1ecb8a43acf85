"""Wireless channel simulation as a differentiable layer.

SNR is defined per real dimension on the power-normalized signal, so an
AWGN channel at ``snr_db`` adds zero-mean Gaussian noise with variance
10^(-snr_db/10) to each real symbol. ``snr_db = inf`` is the noiseless
sentinel used for transmitter-side reference simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import OddLengthStream, ShapeMismatch, ZeroPower

CHANNEL_KINDS = ("awgn", "rayleigh_equalized")


@dataclass
class ChannelConfig:
    kind: str = "awgn"
    snr_db: float = 10.0
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if math.isnan(self.snr_db):
            raise ValueError("snr_db must not be NaN")

    @property
    def noiseless(self) -> bool:
        return math.isinf(self.snr_db) and self.snr_db > 0

    def noise_variance(self) -> float:
        """Per-real-dimension noise variance on a unit-power signal."""
        return 0.0 if self.noiseless else 10.0 ** (-self.snr_db / 10.0)


@dataclass
class SymbolStream:
    """Variable-length channel symbols plus per-embedding segmentation.

    ``norm_scale`` is the power-normalization divisor, known
    deterministically at both ends (it is never transmitted).
    """

    values: torch.Tensor
    segment_lengths: torch.Tensor
    norm_scale: torch.Tensor | float = 1.0

    def __post_init__(self):
        if self.values.dim() != 1:
            raise ShapeMismatch("stream values must be a flat vector")
        self.segment_lengths = torch.as_tensor(self.segment_lengths, dtype=torch.long)
        if int(self.segment_lengths.sum()) != self.values.numel():
            raise ShapeMismatch(
                f"segment lengths sum to {int(self.segment_lengths.sum())}, "
                f"stream holds {self.values.numel()} symbols")

    def __len__(self) -> int:
        return self.values.numel()

    def denormalized(self) -> torch.Tensor:
        return self.values * self.norm_scale


def power_normalize(stream: SymbolStream) -> SymbolStream:
    """Rescale to unit mean power per real dimension; records the scale."""
    if len(stream) == 0:
        raise ZeroPower("cannot normalize an empty stream")
    power = (stream.values ** 2).mean()
    if float(power.detach()) <= 0.0:
        raise ZeroPower("all-zero stream has no defined SNR")
    scale = torch.sqrt(power)
    return SymbolStream(stream.values / scale, stream.segment_lengths,
                        norm_scale=scale)


def _noise_like(values: torch.Tensor, generator) -> torch.Tensor:
    return torch.randn(values.shape, generator=generator,
                       dtype=values.dtype, device=values.device)


def transmit(stream: SymbolStream, cfg: ChannelConfig,
             generator: torch.Generator | None = None) -> SymbolStream:
    """Pass a stream through the channel; identity gradient w.r.t. symbols.

    AWGN adds i.i.d. real Gaussian noise. The equalized Rayleigh model
    packs two consecutive reals into one complex symbol and adds n/h with
    h complex standard normal per symbol (perfect CSI at the receiver).
    """
    if cfg.noiseless:
        return SymbolStream(stream.values, stream.segment_lengths,
                            norm_scale=stream.norm_scale)
    if generator is None and cfg.seed is not None:
        generator = torch.Generator(device=stream.values.device)
        generator.manual_seed(cfg.seed)

    sigma = math.sqrt(cfg.noise_variance())
    if cfg.kind == "awgn":
        noise = sigma * _noise_like(stream.values, generator)
        received = stream.values + noise.detach()
    else:
        n = len(stream)
        if n % 2:
            raise OddLengthStream(
                f"rayleigh_equalized needs an even symbol count, got {n}")
        noise = sigma * _noise_like(stream.values, generator)
        # h ~ CN(0, 1) per complex symbol, repeated over its two reals.
        h_parts = math.sqrt(0.5) * _noise_like(stream.values, generator)
        h_re, h_im = h_parts[0::2], h_parts[1::2]
        h_sq = h_re ** 2 + h_im ** 2
        n_re, n_im = noise[0::2], noise[1::2]
        # (n / h) expanded over real/imaginary parts.
        eq_re = (n_re * h_re + n_im * h_im) / h_sq
        eq_im = (n_im * h_re - n_re * h_im) / h_sq
        eq = torch.stack([eq_re, eq_im], dim=1).reshape(-1)
        received = stream.values + eq.detach()
    return SymbolStream(received, stream.segment_lengths,
                        norm_scale=stream.norm_scale)


def measure_snr(sent: torch.Tensor, received: torch.Tensor) -> float:
    """Empirical 10*log10(signal power / error power); inf when identical."""
    if sent.shape != received.shape:
        raise ShapeMismatch(f"{tuple(sent.shape)} vs {tuple(received.shape)}")
    signal = float((sent.double() ** 2).sum())
    error = float(((received.double() - sent.double()) ** 2).sum())
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(signal / error)
