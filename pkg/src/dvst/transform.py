"""Nonlinear transforms, flow estimation, warping, and context generation.

Pixel-space downsampling is fixed at 32x (four stride-2 stages to /16
plus a 2x2 patch grouping), so a latent grid position corresponds to one
32x32-pixel patch embedding. Simple LeakyReLU stacks stand in for
GDN/ChannelNorm (recorded in config as model.activation).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatch

PATCH = 32


def warp(feature: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward bilinear warp: output(p) = feature(p + flow(p)).

    flow[:, 0] displaces along width, flow[:, 1] along height. Sample
    coordinates clamp to the border. The incremental blend form keeps
    constant inputs exactly constant.
    """
    if feature.shape[0] != flow.shape[0] or feature.shape[-2:] != flow.shape[-2:]:
        raise ShapeMismatch(
            f"feature {tuple(feature.shape)} vs flow {tuple(flow.shape)}")
    if flow.shape[1] != 2:
        raise ShapeMismatch("flow must have two channels (dx, dy)")
    b, c, h, w = feature.shape
    xs = torch.arange(w, dtype=feature.dtype, device=feature.device).view(1, 1, w)
    ys = torch.arange(h, dtype=feature.dtype, device=feature.device).view(1, h, 1)
    sx = (xs + flow[:, 0]).clamp(0, w - 1)
    sy = (ys + flow[:, 1]).clamp(0, h - 1)
    x0 = sx.floor()
    y0 = sy.floor()
    fx = (sx - x0).unsqueeze(1)
    fy = (sy - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = feature.reshape(b, c, h * w)

    def take(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    v00, v10 = take(y0, x0), take(y0, x1)
    v01, v11 = take(y1, x0), take(y1, x1)
    return (v00 + fx * (v10 - v00) + fy * (v01 - v00)
            + fx * fy * (v00 + v11 - v10 - v01))


def _conv(in_ch, out_ch, k=3, stride=1):
    return nn.Conv2d(in_ch, out_ch, k, stride=stride, padding=k // 2)


def _upconv(in_ch, out_ch, k=3):
    """Subpixel 2x upsampling: conv then pixel shuffle (no checkerboard)."""
    return nn.Sequential(nn.Conv2d(in_ch, 4 * out_ch, k, padding=k // 2),
                         nn.PixelShuffle(2))


def _cost_volume(x_t: torch.Tensor, warped_ref: torch.Tensor,
                 radius: int = 2) -> torch.Tensor:
    """Photometric matching costs over a (2r+1)^2 displacement window."""
    costs = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = torch.roll(warped_ref, shifts=(dy, dx), dims=(-2, -1))
            costs.append((x_t - shifted).abs().mean(dim=1, keepdim=True))
    return torch.cat(costs, dim=1)


class FlowEstimator(nn.Module):
    """Coarse-to-fine dense flow pyramid, pretrainable on synthetic shifts.

    Each level refines the upsampled coarser flow from a small local cost
    volume between the current frame and the warped reference.
    """

    radius = 2

    def __init__(self, width: int = 32, levels: int = 3):
        super().__init__()
        self.levels = levels
        in_ch = (2 * self.radius + 1) ** 2 + 5
        self.nets = nn.ModuleList()
        for _ in range(levels):
            self.nets.append(nn.Sequential(
                _conv(in_ch, width, 5), nn.LeakyReLU(0.1, inplace=True),
                _conv(width, width, 5), nn.LeakyReLU(0.1, inplace=True),
                _conv(width, 2, 5),
            ))

    def estimate_flow(self, x_t: torch.Tensor, x_ref: torch.Tensor) -> torch.Tensor:
        if x_t.shape != x_ref.shape:
            raise ShapeMismatch(
                f"frames differ: {tuple(x_t.shape)} vs {tuple(x_ref.shape)}")
        pyr_t, pyr_ref = [x_t], [x_ref]
        for _ in range(self.levels - 1):
            pyr_t.append(F.avg_pool2d(pyr_t[-1], 2))
            pyr_ref.append(F.avg_pool2d(pyr_ref[-1], 2))
        flow = torch.zeros(x_t.shape[0], 2, *pyr_t[-1].shape[-2:],
                           dtype=x_t.dtype, device=x_t.device)
        for level in reversed(range(self.levels)):
            t_l, ref_l = pyr_t[level], pyr_ref[level]
            if flow.shape[-2:] != t_l.shape[-2:]:
                flow = 2.0 * F.interpolate(flow, size=t_l.shape[-2:],
                                           mode="bilinear", align_corners=False)
            warped = warp(ref_l, flow)
            feats = torch.cat([_cost_volume(t_l, warped, self.radius),
                               t_l, flow], dim=1)
            flow = flow + self.nets[level](feats)
        return flow

    forward = estimate_flow


class _Downsample32(nn.Module):
    """Four stride-2 stages to /16, then 2x2 patch grouping to /32."""

    def __init__(self, in_ch: int, width: int, out_ch: int):
        super().__init__()
        self.stages = nn.Sequential(
            _conv(in_ch, width, 5, stride=2), nn.LeakyReLU(0.1, inplace=True),
            _conv(width, width, 5, stride=2), nn.LeakyReLU(0.1, inplace=True),
            _conv(width, width, 5, stride=2), nn.LeakyReLU(0.1, inplace=True),
            _conv(width, width, 5, stride=2), nn.LeakyReLU(0.1, inplace=True),
        )
        self.project = nn.Conv2d(4 * width, out_ch, 1)

    def forward(self, x):
        return self.project(F.pixel_unshuffle(self.stages(x), 2))


class _Upsample32(nn.Module):
    """Mirror of the downsampler: ungroup patches, four stride-2 stages."""

    def __init__(self, in_ch: int, width: int, out_ch: int):
        super().__init__()
        self.project = nn.Conv2d(in_ch, 4 * width, 1)
        self.stages = nn.Sequential(
            _upconv(width, width, 3), nn.LeakyReLU(0.1, inplace=True),
            _upconv(width, width, 3), nn.LeakyReLU(0.1, inplace=True),
            _upconv(width, width, 3), nn.LeakyReLU(0.1, inplace=True),
            _upconv(width, out_ch, 3),
        )

    def forward(self, x):
        return self.stages(F.pixel_shuffle(self.project(x), 2))


class AnalysisTransform(nn.Module):
    """Contextual analysis: frame + feature context -> latent grid.

    A learnable per-channel output gain (init 10) keeps integer
    quantization levels populated from the very first training step.
    """

    def __init__(self, ctx_channels: int, width: int, m_dim: int,
                 init_gain: float = 10.0):
        super().__init__()
        self.trunk = _Downsample32(3 + ctx_channels, width, m_dim)
        self.gain = nn.Parameter(torch.full((1, m_dim, 1, 1), init_gain))

    def forward(self, x: torch.Tensor, feature_ctx: torch.Tensor) -> torch.Tensor:
        if feature_ctx.shape[-2:] != x.shape[-2:]:
            raise ShapeMismatch(
                f"context {tuple(feature_ctx.shape[-2:])} vs frame {tuple(x.shape[-2:])}")
        return self.trunk(torch.cat([x, feature_ctx], dim=1)) * self.gain


class SynthesisTransform(nn.Module):
    """Contextual synthesis: latent grid + feature context -> [0,1] frame."""

    def __init__(self, ctx_channels: int, width: int, m_dim: int):
        super().__init__()
        self.trunk = _Upsample32(m_dim, width, width)
        self.refine = nn.Sequential(
            _conv(width + ctx_channels, width), nn.LeakyReLU(0.1, inplace=True),
            _conv(width, 3),
        )

    def forward(self, y_hat: torch.Tensor, feature_ctx: torch.Tensor) -> torch.Tensor:
        feats = self.trunk(y_hat)
        if feature_ctx.shape[-2:] != feats.shape[-2:]:
            raise ShapeMismatch(
                f"context {tuple(feature_ctx.shape[-2:])} vs features {tuple(feats.shape[-2:])}")
        out = self.refine(torch.cat([feats, feature_ctx], dim=1))
        # straight-through clamp: exact [0,1] range, gradients stay alive
        return out + (out.clamp(0.0, 1.0) - out).detach()


class MotionAnalysis(nn.Module):
    """Motion-link analysis; same family, no context inputs."""

    def __init__(self, width: int, m_dim: int, init_gain: float = 10.0):
        super().__init__()
        self.trunk = _Downsample32(2, width, m_dim)
        self.gain = nn.Parameter(torch.full((1, m_dim, 1, 1), init_gain))

    def forward(self, motion: torch.Tensor) -> torch.Tensor:
        return self.trunk(motion) * self.gain


class MotionSynthesis(nn.Module):
    def __init__(self, width: int, m_dim: int):
        super().__init__()
        self.trunk = _Upsample32(m_dim, width, 2)

    def forward(self, y_mv_hat: torch.Tensor) -> torch.Tensor:
        return self.trunk(y_mv_hat)


class HyperEncoder(nn.Module):
    """Latent grid -> hyperprior at /4 spatial (floored at 1x1)."""

    def __init__(self, m_dim: int, hyper_ch: int, init_gain: float = 4.0):
        super().__init__()
        self.net = nn.Sequential(
            _conv(m_dim, hyper_ch), nn.LeakyReLU(0.1, inplace=True),
            _conv(hyper_ch, hyper_ch, stride=2), nn.LeakyReLU(0.1, inplace=True),
            _conv(hyper_ch, hyper_ch, stride=2),
        )
        self.gain = nn.Parameter(torch.full((1, hyper_ch, 1, 1), init_gain))

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(y) * self.gain


class HyperDecoder(nn.Module):
    """Hyperprior -> hierarchical prior on the latent grid."""

    def __init__(self, hyper_ch: int, out_ch: int):
        super().__init__()
        self.net = nn.Sequential(
            _upconv(hyper_ch, hyper_ch), nn.LeakyReLU(0.1, inplace=True),
            _upconv(hyper_ch, hyper_ch), nn.LeakyReLU(0.1, inplace=True),
            _conv(hyper_ch, out_ch),
        )

    def forward(self, z: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
        out = self.net(z)
        if out.shape[-2:] != tuple(out_hw):
            # Degenerate tiny grids (see hyper shape contract): resize exactly.
            out = F.interpolate(out, size=tuple(out_hw), mode="bilinear",
                                align_corners=False)
        return out


class FeatureContextNet(nn.Module):
    """Feature-domain context: extract, warp by the motion field, refine.

    A single instance serves both link ends; tx/rx differ only in which
    reference frame and motion field they pass in.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.extract = nn.Sequential(
            _conv(3, channels), nn.LeakyReLU(0.1, inplace=True),
            _conv(channels, channels),
        )
        self.refine = nn.Sequential(
            _conv(channels, channels), nn.LeakyReLU(0.1, inplace=True),
            _conv(channels, channels),
        )

    def make_feature_context(self, x_ref: torch.Tensor,
                             motion: torch.Tensor) -> torch.Tensor:
        return self.refine(warp(self.extract(x_ref), motion))

    forward = make_feature_context


class CodewordContextNet(nn.Module):
    """Codeword-domain context on the embedding grid.

    The pixel-scale motion field is average-pooled down to the precoded
    resolution with displacement values rescaled by the pooling factor.
    """

    def __init__(self, m_dim: int):
        super().__init__()
        self.precode = nn.Sequential(
            _conv(m_dim, m_dim), nn.LeakyReLU(0.1, inplace=True),
            _conv(m_dim, m_dim),
        )
        self.refine = _conv(m_dim, m_dim)

    def make_codeword_context(self, y_ref: torch.Tensor,
                              motion: torch.Tensor) -> torch.Tensor:
        pre = self.precode(y_ref)
        factor = motion.shape[-1] // pre.shape[-1]
        if factor < 1 or motion.shape[-1] != factor * pre.shape[-1] \
                or motion.shape[-2] != factor * pre.shape[-2]:
            raise ShapeMismatch(
                f"motion {tuple(motion.shape[-2:])} does not pool onto "
                f"grid {tuple(pre.shape[-2:])}")
        if factor > 1:
            motion = F.avg_pool2d(motion, factor) / factor
        return self.refine(warp(pre, motion))

    forward = make_codeword_context


class TemporalPriorEncoder(nn.Module):
    """Feature context (pixel resolution) -> temporal prior on the latent grid."""

    def __init__(self, ctx_channels: int, width: int, out_ch: int):
        super().__init__()
        self.trunk = _Downsample32(ctx_channels, width, out_ch)

    def forward(self, feature_ctx: torch.Tensor) -> torch.Tensor:
        return self.trunk(feature_ctx)
