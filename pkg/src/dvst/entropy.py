"""Variational entropy estimation for latent grids.

A latent embedding is modeled as Laplace with per-element (mu, sigma)
produced by fusing a hierarchical prior (hyperprior decoder output), a
causal spatial prior, and optionally a temporal prior. Hyperpriors get a
learned per-channel factorized density. Probabilities are the exact
CDF-difference closed forms; the 2^-16 floor is applied only where
probabilities become bits so entropies stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatch

P_FLOOR = 2.0 ** -16
SIGMA_FLOOR = 1e-6


def add_uniform_noise(y: torch.Tensor) -> torch.Tensor:
    """Quantization proxy: y + U(-1/2, 1/2), identity gradient."""
    return y + torch.empty_like(y).uniform_(-0.5, 0.5)


def ste_round(y: torch.Tensor) -> torch.Tensor:
    """Rounded forward, identity gradient.

    Reconstruction paths train on this instead of the noisy proxy so that
    sub-integer latent detail cannot smuggle information the quantized
    test-time entropies would price at zero.
    """
    return y + (torch.round(y) - y).detach()


@dataclass
class LaplaceParams:
    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ShapeMismatch(
                f"mu {tuple(self.mu.shape)} vs sigma {tuple(self.sigma.shape)}")
        self.sigma = self.sigma.clamp(min=SIGMA_FLOOR)


def laplace_uniform_pmf(n: torch.Tensor, mu: torch.Tensor,
                        sigma: torch.Tensor) -> torch.Tensor:
    """P(n) = F(n + 1/2) - F(n - 1/2) under Laplace(mu, sigma).

    Valid for real-valued n as well (the uniform-noise proxy evaluates the
    same convolution at non-integer points). All exponents are kept
    non-positive, so the expression is overflow-safe down to the sigma
    floor.
    """
    sigma = torch.as_tensor(sigma).clamp(min=SIGMA_FLOOR)
    a = (torch.as_tensor(n) - mu).abs() / sigma
    h = 0.5 / sigma
    tail = 0.5 * (torch.exp(-(a - h).clamp(min=0.0)) - torch.exp(-(a + h)))
    center = 1.0 - 0.5 * (torch.exp(-(h - a).clamp(min=0.0)) + torch.exp(-(h + a)))
    return torch.where(a >= h, tail, center)


def pmf_to_bits(p: torch.Tensor, floor: float = P_FLOOR) -> torch.Tensor:
    """-log2 of a probability, floored for finite entropies."""
    return -torch.log2(p.clamp(min=floor, max=1.0))


def embedding_entropy(y_bar: torch.Tensor, params: LaplaceParams) -> torch.Tensor:
    """Bits per embedding: channel-sum of -log2 P over a (B, M, h, w) grid."""
    if y_bar.shape != params.mu.shape:
        raise ShapeMismatch(
            f"latent {tuple(y_bar.shape)} vs params {tuple(params.mu.shape)}")
    bits = pmf_to_bits(laplace_uniform_pmf(y_bar, params.mu, params.sigma))
    return bits.sum(dim=-3)


class FactorizedDensity(nn.Module):
    """Per-channel monotone CDF for hyperprior latents.

    Three internal stages of width 3; the implied CDF maps R -> (0, 1).
    Initialization is symmetric about zero (biases and mixing factors start
    at zero), so the initial pmf is even.
    """

    def __init__(self, channels: int, filters: tuple = (3, 3, 3),
                 init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for k in range(len(dims) - 1):
            init = torch.log(torch.expm1(torch.tensor(1.0 / scale / dims[k + 1])))
            self._matrices.append(nn.Parameter(
                torch.full((channels, dims[k + 1], dims[k]), float(init))))
            self._biases.append(nn.Parameter(
                torch.zeros(channels, dims[k + 1], 1)))
            if k < len(dims) - 2:
                self._factors.append(nn.Parameter(
                    torch.zeros(channels, dims[k + 1], 1)))

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        """Elementwise CDF of a (..., C, h, w) grid, per channel."""
        shape = x.shape
        c = shape[-3]
        if c != self.channels:
            raise ShapeMismatch(f"expected {self.channels} channels, got {c}")
        # (C, 1, N) with N collecting batch and spatial positions.
        flat = x.reshape(-1, c, shape[-2] * shape[-1])
        flat = flat.permute(1, 0, 2).reshape(c, 1, -1)
        logits = flat
        n_layers = len(self._matrices)
        for k in range(n_layers):
            logits = torch.bmm(F.softplus(self._matrices[k]).to(x.dtype), logits)
            logits = logits + self._biases[k].to(x.dtype)
            if k < n_layers - 1:
                logits = logits + torch.tanh(self._factors[k].to(x.dtype)) * torch.tanh(logits)
        out = torch.sigmoid(logits)
        out = out.reshape(c, -1, shape[-2] * shape[-1]).permute(1, 0, 2)
        return out.reshape(shape)

    def pmf(self, n: torch.Tensor) -> torch.Tensor:
        return (self.cdf(n + 0.5) - self.cdf(n - 0.5)).clamp(min=0.0)

    def bits(self, n: torch.Tensor) -> torch.Tensor:
        """Total -log2 p over the grid (scalar per batch element)."""
        b = pmf_to_bits(self.pmf(n))
        return b.sum(dim=tuple(range(1, b.dim()))) if b.dim() > 3 else b.sum()


def factorized_pmf(n: torch.Tensor, density: FactorizedDensity) -> torch.Tensor:
    return density.pmf(n)


class _MaskedConv2d(nn.Conv2d):
    """3x3 conv whose kernel only sees strictly-preceding raster positions."""

    def __init__(self, in_ch, out_ch):
        super().__init__(in_ch, out_ch, kernel_size=3, padding=1)
        mask = torch.zeros(3, 3)
        mask[0, :] = 1.0
        mask[1, 0] = 1.0
        self.register_buffer("mask", mask[None, None])

    def forward(self, x):
        return F.conv2d(x, self.weight * self.mask, self.bias,
                        padding=self.padding)


class ConditionalEntropyModel(nn.Module):
    """Fuses hierarchical/spatial/temporal priors into Laplace parameters.

    BA mode applies the causal spatial prior (parameters for raster
    position i depend only on positions < i); FA mode replaces it with a
    zero grid. The fusion network is pointwise so causality survives it.
    The produced sigma is bounded below by ``sigma_min``: unbounded rate
    gradients (which scale like 1/sigma) otherwise crush latent
    dimensions one by one at desk scale.
    """

    sigma_min = 0.15

    def __init__(self, m_dim: int, hier_channels: int,
                 temporal_channels: int | None = None, mode: str = "BA"):
        super().__init__()
        if mode not in ("BA", "FA"):
            raise ValueError(f"mode must be BA or FA, got {mode!r}")
        self.m_dim = m_dim
        self.mode = mode
        self.temporal_channels = temporal_channels
        spatial_out = 2 * m_dim
        self.spatial_prior = nn.Sequential(
            _MaskedConv2d(m_dim, spatial_out),
            nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(spatial_out, spatial_out, 1),
        )
        fuse_in = hier_channels + spatial_out + (temporal_channels or 0)
        self.fusion = nn.Sequential(
            nn.Conv2d(fuse_in, 2 * m_dim, 1),
            nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(2 * m_dim, 2 * m_dim, 1),
        )
        # Start at mu = 0, sigma = 1 regardless of inputs.
        last = self.fusion[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
        with torch.no_grad():
            last.bias[m_dim:] = 0.5413248546129181  # softplus^-1(1)

    def fuse_priors(self, hier: torch.Tensor, spatial: torch.Tensor | None,
                    temporal: torch.Tensor | None = None,
                    mode: str | None = None) -> LaplaceParams:
        mode = mode or self.mode
        b, _, h, w = hier.shape
        if mode == "BA":
            if spatial is None:
                raise ShapeMismatch("BA mode needs the latent grid for the spatial prior")
            if spatial.shape[-2:] != hier.shape[-2:]:
                raise ShapeMismatch(
                    f"spatial grid {tuple(spatial.shape[-2:])} vs hier {h, w}")
            spatial_feat = self.spatial_prior(spatial)
        else:
            spatial_feat = hier.new_zeros(b, 2 * self.m_dim, h, w)
        parts = [hier, spatial_feat]
        if self.temporal_channels:
            if temporal is None:
                raise ShapeMismatch("this entropy model expects a temporal prior")
            if temporal.shape[-2:] != hier.shape[-2:]:
                raise ShapeMismatch(
                    f"temporal grid {tuple(temporal.shape[-2:])} vs hier {h, w}")
            parts.append(temporal)
        fused = self.fusion(torch.cat(parts, dim=1))
        mu, sigma_raw = fused.chunk(2, dim=1)
        return LaplaceParams(mu=mu, sigma=F.softplus(sigma_raw))
