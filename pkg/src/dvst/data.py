"""Procedural moving-pattern clips for desk-scale training and eval.

Each clip is a smooth gradient-plus-texture background with a few sprites
translating at constant velocity. Values stay inside [0.05, 0.95] so
reconstruction gradients never die at the synthesis clamp. Clips are
deterministic functions of (seed, index).
"""

from __future__ import annotations

import numpy as np
import torch

from .video_io import Frame


def synthetic_clip(seed: int, length: int = 4, size: int = 64,
                   motion_scale: float = 1.5, static: bool = False) -> np.ndarray:
    """(T, H, W, 3) float32 clip in [0.05, 0.95]."""
    rng = np.random.default_rng(seed)
    h = w = size
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")

    gx = rng.uniform(-1, 1, size=3)
    gy = rng.uniform(-1, 1, size=3)
    base = rng.uniform(0.15, 0.85, size=3)
    freq = rng.uniform(0.03, 0.09, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    background = np.stack([
        base[c] + 0.3 * (gx[c] * xx / w + gy[c] * yy / h)
        + 0.08 * np.sin(2 * np.pi * freq[0] * xx + phase[0])
        * np.cos(2 * np.pi * freq[1] * yy + phase[1])
        for c in range(3)], axis=-1)

    n_sprites = int(rng.integers(2, 4))
    sprites = []
    for _ in range(n_sprites):
        kind = rng.choice(["rect", "disc"])
        half = rng.uniform(size * 0.1, size * 0.25, size=2)
        pos = rng.uniform(0, [h, w])
        vel = np.zeros(2) if static else rng.uniform(-motion_scale, motion_scale, size=2)
        color = rng.uniform(0.05, 0.95, size=3)
        sprites.append((kind, half, pos, vel, color))
    global_vel = np.zeros(2) if static else rng.uniform(-motion_scale / 2,
                                                        motion_scale / 2, size=2)

    frames = []
    for t in range(length):
        shift = global_vel * t
        img = np.stack([
            np.take(np.take(background[..., c],
                            (np.arange(h) + int(round(shift[0]))) % h, axis=0),
                    (np.arange(w) + int(round(shift[1]))) % w, axis=1)
            for c in range(3)], axis=-1)
        for kind, half, pos, vel, color in sprites:
            cy = (pos[0] + vel[0] * t) % h
            cx = (pos[1] + vel[1] * t) % w
            dy = np.minimum(np.abs(yy - cy), h - np.abs(yy - cy))
            dx = np.minimum(np.abs(xx - cx), w - np.abs(xx - cx))
            if kind == "rect":
                mask = (dy <= half[0]) & (dx <= half[1])
            else:
                mask = (dy / half[0]) ** 2 + (dx / half[1]) ** 2 <= 1.0
            img[mask] = color
        frames.append(img)
    clip = np.stack(frames).astype(np.float32)
    return np.clip(clip, 0.05, 0.95)


class SyntheticClips:
    """Indexable deterministic clip collection."""

    def __init__(self, num_clips: int, length: int = 4, size: int = 64,
                 motion_scale: float = 1.5, static: bool = False,
                 seed: int = 0):
        self.num_clips = num_clips
        self.length = length
        self.size = size
        self.motion_scale = motion_scale
        self.static = static
        self.seed = seed

    def __len__(self) -> int:
        return self.num_clips

    def clip_array(self, index: int) -> np.ndarray:
        if not 0 <= index < self.num_clips:
            raise IndexError(index)
        return synthetic_clip(self.seed * 1_000_003 + index, self.length,
                              self.size, self.motion_scale, self.static)

    def clip_tensor(self, index: int) -> torch.Tensor:
        """(T, 3, H, W) float tensor."""
        return torch.from_numpy(self.clip_array(index)).permute(0, 3, 1, 2)

    def clip_frames(self, index: int) -> list:
        return [Frame(px) for px in self.clip_array(index)]


def shift_frame(frame: torch.Tensor, dx: int, dy: int) -> torch.Tensor:
    """Integer toroidal shift of a (B, C, H, W) frame by (dx, dy) pixels."""
    return torch.roll(frame, shifts=(dy, dx), dims=(-2, -1))
