"""Entropy-driven variable-length joint source-channel coding.

Each latent-grid position is an M-dimensional patch embedding whose
channel-symbol budget is its entropy scaled by eta, quantized onto a
value set. A shared window-attention backbone processes the embedding
sequence; light per-rate linear heads produce or consume exactly that
many symbols. Rate tokens signal the budget to the backbone. The receiver
learns a placeholder vector for omitted (zero-budget) embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .channel import SymbolStream, power_normalize
from .config import gaussian_capacity
from .errors import CorruptStream, InvalidEta, ShapeMismatch, UnknownRate


@dataclass(frozen=True)
class ValueSet:
    """Admissible per-embedding symbol counts; signaled as side information."""

    values: tuple

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        if vals != tuple(sorted(vals)) or len(set(vals)) != len(vals):
            raise ValueError("value set must be strictly ascending")
        if 0 not in vals:
            raise ValueError("value set must contain 0")
        if len(vals) & (len(vals) - 1):
            raise ValueError("value set size must be a power of 2")
        object.__setattr__(self, "values", vals)

    @property
    def bits_per_embedding(self) -> int:
        return max(int(math.ceil(math.log2(len(self.values)))), 1)

    @property
    def max_value(self) -> int:
        return self.values[-1]

    def __len__(self) -> int:
        return len(self.values)

    def index_of(self, k_bar: torch.Tensor) -> torch.Tensor:
        """Value-set indices of a grid of admissible costs."""
        table = torch.full((self.max_value + 1,), -1, dtype=torch.long)
        for i, v in enumerate(self.values):
            table[v] = i
        k_long = k_bar.round().long()
        if k_long.min() < 0 or k_long.max() > self.max_value:
            raise UnknownRate(f"cost outside value set range: {k_long.unique().tolist()}")
        idx = table.to(k_bar.device)[k_long]
        if (idx < 0).any():
            bad = sorted(set(k_long[idx < 0].tolist()))
            raise UnknownRate(f"costs {bad} not in value set {self.values}")
        return idx


def allocate(entropy_bits: torch.Tensor, eta: float) -> torch.Tensor:
    """Channel-symbol budget per embedding: eta * entropy."""
    if not eta > 0:
        raise InvalidEta(f"eta must be positive, got {eta}")
    return eta * entropy_bits


def quantize_rate(k: torch.Tensor, vset: ValueSet, ste: bool = False) -> torch.Tensor:
    """Nearest value-set member, ties resolved upward, clamped at the top.

    With ``ste`` the quantized value is used forward but the gradient
    passes straight through to the continuous cost.
    """
    values = torch.tensor(vset.values, dtype=k.dtype, device=k.device)
    mids = (values[1:] + values[:-1]) / 2
    idx = torch.bucketize(k.detach(), mids, right=True)
    k_bar = values[idx]
    if ste:
        return k + (k_bar - k).detach()
    return k_bar


class RateTokens(nn.Module):
    """One learnable M-dimensional vector per value-set entry."""

    def __init__(self, vset: ValueSet, m_dim: int):
        super().__init__()
        self.vset = vset
        self.tokens = nn.Parameter(0.02 * torch.randn(len(vset), m_dim))

    def forward(self, k_bar: torch.Tensor) -> torch.Tensor:
        """(h, w) cost grid -> (h, w, M) token grid."""
        return self.tokens[self.vset.index_of(k_bar)]


class _WindowBlock(nn.Module):
    """Pre-LN windowed multi-head self-attention + MLP, optional cyclic shift."""

    def __init__(self, dim: int, heads: int, window: int, shift: int):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, H, W, C)
        b, h, w, c = x.shape
        win = min(self.window, h, w)
        shift = self.shift if (h > win or w > win) else 0
        pad_h = (win - h % win) % win
        pad_w = (win - w % win) % win
        y = self.norm1(x)
        if shift:
            y = torch.roll(y, shifts=(-shift, -shift), dims=(1, 2))
        if pad_h or pad_w:
            y = F.pad(y, (0, 0, 0, pad_w, 0, pad_h))
        hp, wp = y.shape[1], y.shape[2]
        y = y.view(b, hp // win, win, wp // win, win, c)
        y = y.permute(0, 1, 3, 2, 4, 5).reshape(-1, win * win, c)
        y, _ = self.attn(y, y, y, need_weights=False)
        y = y.view(b, hp // win, wp // win, win, win, c)
        y = y.permute(0, 1, 3, 2, 4, 5).reshape(b, hp, wp, c)
        if pad_h or pad_w:
            y = y[:, :h, :w]
        if shift:
            y = torch.roll(y, shifts=(shift, shift), dims=(1, 2))
        x = x + y
        return x + self.mlp(self.norm2(x))


class _Backbone(nn.Module):
    def __init__(self, dim: int, blocks: int, heads: int, window: int):
        super().__init__()
        self.blocks = nn.ModuleList(
            _WindowBlock(dim, heads, window, shift=(window // 2) * (i % 2))
            for i in range(blocks))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class JsccEncoder(nn.Module):
    """Latent grid -> power-normalized variable-length symbol stream."""

    def __init__(self, m_dim: int, vset: ValueSet, blocks: int, heads: int,
                 window: int, with_context: bool):
        super().__init__()
        self.m_dim = m_dim
        self.vset = vset
        self.with_context = with_context
        in_ch = 2 * m_dim if with_context else m_dim
        self.fuse = nn.Conv2d(in_ch, m_dim, 1)
        self.backbone = _Backbone(m_dim, blocks, heads, window)
        self.out_heads = nn.ModuleDict(
            {str(v): nn.Linear(m_dim, v) for v in vset.values if v > 0})

    def encode(self, y: torch.Tensor, codeword_ctx: torch.Tensor | None,
               k_bar: torch.Tensor, tokens: RateTokens) -> SymbolStream:
        if y.shape[0] != 1:
            raise ShapeMismatch("encode operates on one latent grid at a time")
        _, _, h, w = y.shape
        if self.with_context:
            if codeword_ctx is None or codeword_ctx.shape != y.shape:
                raise ShapeMismatch("codeword context must match the latent grid")
            fused = self.fuse(torch.cat([y, codeword_ctx], dim=1))
        else:
            fused = self.fuse(y)
        grid = k_bar.reshape(h, w)
        emb = fused.permute(0, 2, 3, 1)
        if tokens is not None:
            emb = emb + tokens(grid).unsqueeze(0)
        emb = self.backbone(emb).reshape(h * w, self.m_dim)

        flat_k = grid.reshape(-1)
        idx = self.vset.index_of(flat_k)
        pieces: list = [None] * (h * w)
        for vi, v in enumerate(self.vset.values):
            if v == 0:
                continue
            positions = (idx == vi).nonzero(as_tuple=True)[0]
            if positions.numel() == 0:
                continue
            rows = self.out_heads[str(v)](emb[positions])
            for j, pos in enumerate(positions.tolist()):
                pieces[pos] = rows[j]
        parts = [p for p in pieces if p is not None]
        seg_lengths = flat_k.detach().round().long()
        if not parts:
            return SymbolStream(y.new_zeros(0), seg_lengths)
        stream = SymbolStream(torch.cat(parts), seg_lengths)
        return power_normalize(stream)


class JsccDecoder(nn.Module):
    """Received stream -> latent grid on the full embedding layout."""

    def __init__(self, m_dim: int, vset: ValueSet, blocks: int, heads: int,
                 window: int, with_context: bool):
        super().__init__()
        self.m_dim = m_dim
        self.vset = vset
        self.with_context = with_context
        self.in_heads = nn.ModuleDict(
            {str(v): nn.Linear(v, m_dim) for v in vset.values if v > 0})
        self.placeholder = nn.Parameter(0.02 * torch.randn(m_dim))
        in_ch = 2 * m_dim if with_context else m_dim
        self.fuse = nn.Conv2d(in_ch, m_dim, 1)
        self.backbone = _Backbone(m_dim, blocks, heads, window)
        self.project = nn.Conv2d(m_dim, m_dim, 1)

    def decode(self, stream: SymbolStream, codeword_ctx: torch.Tensor | None,
               k_bar: torch.Tensor, tokens: RateTokens) -> torch.Tensor:
        grid = k_bar.reshape(k_bar.shape[-2], k_bar.shape[-1])
        h, w = grid.shape
        flat_k = grid.reshape(-1).detach().round().long()
        if not torch.equal(stream.segment_lengths, flat_k):
            raise CorruptStream("segment lengths disagree with the cost grid")
        if int(flat_k.sum()) != len(stream):
            raise CorruptStream(
                f"stream holds {len(stream)} symbols, costs sum to {int(flat_k.sum())}")
        values = stream.denormalized()
        idx = self.vset.index_of(grid.reshape(-1))
        offsets = torch.cat([flat_k.new_zeros(1), flat_k.cumsum(0)[:-1]])
        emb = values.new_empty(h * w, self.m_dim)
        for vi, v in enumerate(self.vset.values):
            positions = (idx == vi).nonzero(as_tuple=True)[0]
            if positions.numel() == 0:
                continue
            if v == 0:
                emb[positions] = self.placeholder.to(values.dtype)
                continue
            segs = torch.stack([
                values[offsets[p]:offsets[p] + v] for p in positions.tolist()])
            emb[positions] = self.in_heads[str(v)](segs)
        if tokens is not None:
            emb = emb + tokens(grid).reshape(h * w, self.m_dim)
        grid_m = emb.reshape(1, h, w, self.m_dim).permute(0, 3, 1, 2)
        if self.with_context:
            if codeword_ctx is None or codeword_ctx.shape != grid_m.shape:
                raise ShapeMismatch("codeword context must match the latent grid")
            fused = self.fuse(torch.cat([grid_m, codeword_ctx], dim=1))
        else:
            fused = self.fuse(grid_m)
        out = self.backbone(fused.permute(0, 2, 3, 1))
        return self.project(out.permute(0, 3, 1, 2))


def side_info_bits(num_embeddings: int, vset: ValueSet) -> int:
    """Bits needed to signal each embedding's budget."""
    return num_embeddings * vset.bits_per_embedding


def side_info_symbols(side_bits: float, snr_db: float) -> float:
    """Symbol-equivalent of side bits via the Gaussian capacity at this SNR."""
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return side_bits / gaussian_capacity(snr_db)


def cbr_components(k_bar_primary, k_bar_motion, side_bits: float,
                   frame_dim: int, snr_db: float,
                   include_side: bool = True) -> tuple[float, float, float]:
    """(primary, motion, side) channel bandwidth ratio components."""
    k_pl = float(k_bar_primary.sum()) if k_bar_primary is not None else 0.0
    k_ml = float(k_bar_motion.sum()) if k_bar_motion is not None else 0.0
    side = side_info_symbols(side_bits, snr_db) if include_side else 0.0
    return k_pl / frame_dim, k_ml / frame_dim, side / frame_dim


def account_cbr(k_bar_primary, k_bar_motion, side_bits: float, frame_dim: int,
                snr_db: float, include_side: bool = True) -> float:
    """Per-frame channel bandwidth ratio (channel symbols per source dim)."""
    parts = cbr_components(k_bar_primary, k_bar_motion, side_bits,
                           frame_dim, snr_db, include_side)
    return parts[0] + parts[1] + parts[2]
