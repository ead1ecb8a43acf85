"""Frame loading, GOP grouping, and reconstruction metrics.

Frames are H x W x 3 float arrays in [0, 1] with dimensions divisible by
the 32-pixel patch size (padded by edge replication when needed). Metrics
are computed in RGB.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import FrameTooSmall, InvalidGopSize, NoFrames, ShapeMismatch

PATCH = 32
PSNR_CAP_DB = 100.0

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tiff", ".tif"}


@dataclass
class Frame:
    """One video frame; ``content_hw`` is the pre-padding size."""

    pixels: np.ndarray
    content_hw: tuple[int, int] | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeMismatch(f"expected HxWx3 pixel grid, got {px.shape}")
        if px.shape[0] % PATCH or px.shape[1] % PATCH:
            raise ShapeMismatch(
                f"frame dims {px.shape[:2]} not divisible by {PATCH}")
        if float(px.min()) < 0.0 or float(px.max()) > 1.0:
            raise ValueError("pixel values outside [0, 1]")
        self.pixels = px
        if self.content_hw is None:
            self.content_hw = (px.shape[0], px.shape[1])

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def content(self) -> np.ndarray:
        ch, cw = self.content_hw
        return self.pixels[:ch, :cw]

    def to_tensor(self) -> torch.Tensor:
        """(1, 3, H, W) float tensor."""
        return torch.from_numpy(self.pixels).permute(2, 0, 1).unsqueeze(0)

    @classmethod
    def from_tensor(cls, x: torch.Tensor, content_hw=None) -> "Frame":
        px = x.detach().squeeze(0).permute(1, 2, 0).clamp(0.0, 1.0).cpu().numpy()
        return cls(px, content_hw=content_hw)


@dataclass
class Gop:
    """One I-frame followed by P-frames."""

    frames: list = field(default_factory=list)
    i_frame_index: int = 0

    def __post_init__(self):
        if len(self.frames) < 1:
            raise InvalidGopSize("a GOP needs at least one frame")

    def __len__(self) -> int:
        return len(self.frames)


def pad_to_patch(pixels: np.ndarray) -> np.ndarray:
    """Edge-replicate to the next multiple of the patch size."""
    h, w = pixels.shape[:2]
    ph = (PATCH - h % PATCH) % PATCH
    pw = (PATCH - w % PATCH) % PATCH
    if ph == 0 and pw == 0:
        return pixels
    return np.pad(pixels, ((0, ph), (0, pw), (0, 0)), mode="edge")


def load_sequence(directory_path, crop_size: int | None = None,
                  max_frames: int | None = None, crop: str = "center",
                  rng: np.random.Generator | None = None) -> list[Frame]:
    """Load ordered image files from a directory as [0,1] frames.

    With ``crop_size`` set, a center (default) or random crop is taken;
    without it, frames are padded by edge replication to a multiple of 32.
    """
    directory = Path(directory_path)
    paths = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not paths:
        raise NoFrames(f"no image files in {directory}")
    if max_frames is not None:
        paths = paths[:max_frames]

    frames: list[Frame] = []
    base_shape = None
    crop_origin = None
    for path in paths:
        px = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        if base_shape is None:
            base_shape = px.shape
        elif px.shape != base_shape:
            raise ShapeMismatch(
                f"{path.name} has shape {px.shape[:2]}, expected {base_shape[:2]}")
        if crop_size is not None:
            h, w = px.shape[:2]
            if crop_origin is None:
                if crop == "random":
                    gen = rng or np.random.default_rng()
                    top = int(gen.integers(0, max(h - crop_size, 0) + 1))
                    left = int(gen.integers(0, max(w - crop_size, 0) + 1))
                else:
                    top = max((h - crop_size) // 2, 0)
                    left = max((w - crop_size) // 2, 0)
                crop_origin = (top, left)
            top, left = crop_origin
            px = px[top:top + crop_size, left:left + crop_size]
        content_hw = px.shape[:2]
        px = pad_to_patch(px)
        frames.append(Frame(px, content_hw=content_hw))
    return frames


def partition_gops(frames: list, gop_size: int) -> list[Gop]:
    """Split frames into consecutive GOPs; the remainder forms a short one."""
    if gop_size < 1:
        raise InvalidGopSize(f"GOP size must be >= 1, got {gop_size}")
    return [Gop(frames=list(frames[i:i + gop_size]))
            for i in range(0, len(frames), gop_size)]


def psnr(a: Frame, b: Frame) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] pixels, capped at 100."""
    pa, pb = a.content(), b.content()
    if pa.shape != pb.shape:
        raise ShapeMismatch(f"{pa.shape} vs {pb.shape}")
    mse = float(np.mean((pa.astype(np.float64) - pb.astype(np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).float()


def msssim_scales(height: int, width: int, max_scales: int = 5,
                  win_size: int = 11) -> int:
    """Largest usable scale count; each scale halves the resolution."""
    scales = 0
    m = min(height, width)
    while scales < max_scales and m > (win_size - 1) * (2 ** scales):
        scales += 1
    return scales


# Weights from the standard 5-scale variant; truncated and renormalized
# when the frame only supports fewer scales.
_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def ms_ssim(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Multi-scale SSIM of two (B, C, H, W) tensors in [0, 1]; differentiable."""
    if x.shape != y.shape:
        raise ShapeMismatch(f"{tuple(x.shape)} vs {tuple(y.shape)}")
    scales = msssim_scales(x.shape[-2], x.shape[-1])
    if scales < 1:
        raise FrameTooSmall(f"min dim {min(x.shape[-2:])} below one SSIM scale")
    weights = torch.tensor(_MSSSIM_WEIGHTS[:scales], dtype=x.dtype, device=x.device)
    weights = weights / weights.sum()

    kernel = _gaussian_kernel().to(dtype=x.dtype, device=x.device)
    kernel = kernel.expand(x.shape[1], 1, -1, -1)
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    def _filter(t):
        return F.conv2d(t, kernel, groups=t.shape[1])

    mcs = []
    ssim_val = None
    for i in range(scales):
        mu_x, mu_y = _filter(x), _filter(y)
        sigma_x = _filter(x * x) - mu_x ** 2
        sigma_y = _filter(y * y) - mu_y ** 2
        sigma_xy = _filter(x * y) - mu_x * mu_y
        cs = (2 * sigma_xy + c2) / (sigma_x + sigma_y + c2)
        ssim_map = ((2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)) * cs
        if i < scales - 1:
            mcs.append(cs.mean().clamp(min=0.0))
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
        else:
            ssim_val = ssim_map.mean().clamp(min=0.0)
    result = ssim_val ** weights[-1]
    for i, cs in enumerate(mcs):
        result = result * cs ** weights[i]
    return result


def ms_ssim_db(a: Frame, b: Frame) -> float:
    """MS-SSIM converted to dB as -10*log10(1 - m), capped at 100."""
    pa, pb = a.content(), b.content()
    if pa.shape != pb.shape:
        raise ShapeMismatch(f"{pa.shape} vs {pb.shape}")
    with torch.no_grad():
        ta = torch.from_numpy(pa).permute(2, 0, 1).unsqueeze(0).double()
        tb = torch.from_numpy(pb).permute(2, 0, 1).unsqueeze(0).double()
        m = float(ms_ssim(ta, tb))
    return similarity_to_db(m)


def similarity_to_db(m: float) -> float:
    """-10*log10(1 - m) with the zero-error cap."""
    if m >= 1.0 - 1e-10:
        return PSNR_CAP_DB
    return min(-10.0 * math.log10(1.0 - m), PSNR_CAP_DB)
