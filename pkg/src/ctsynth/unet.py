"""3D U-Net denoiser with text cross-attention for latent rectified flow.

Four resolution levels by default. Every level carries a time-conditioned
residual block; the last two levels and the bottleneck additionally
cross-attend from voxel queries to the 3-token conditioning context, which is
where the report steers generation. The final projection is zero-initialized
so the untrained network predicts zero velocity, keeping the first training
steps well-scaled.

Continuous time t in [0, 1] is embedded sinusoidally after scaling by 1000
(the forward-process discretization), then pushed through a small MLP and
added into each residual block.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import DenoiserConfig

TIME_SCALE = 1000.0


def _group_norm(ch: int) -> nn.GroupNorm:
    groups = min(8, ch)
    while ch % groups:
        groups -= 1
    return nn.GroupNorm(groups, ch)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of shape (batch, dim) for t in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    # Follow the dtype of t so the module also runs under float64 (the cast
    # is a no-op in the ordinary float32 path).
    args = t[:, None] * TIME_SCALE * freqs[None].to(t.dtype)
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimeResBlock(nn.Module):
    """Residual block with an additive per-channel time shift."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = _group_norm(in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = _group_norm(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention3d(nn.Module):
    """Multi-head attention from voxel queries to the conditioning tokens."""

    def __init__(self, channels: int, context_dim: int, num_heads: int):
        super().__init__()
        if channels % num_heads:
            raise ValueError(f"channels {channels} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.norm = _group_norm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, context):
        b, c, *spatial = x.shape
        n = math.prod(spatial)
        head_dim = c // self.num_heads

        q = self.to_q(self.norm(x).reshape(b, c, n).transpose(1, 2))
        k = self.to_k(context)
        v = self.to_v(context)
        q = q.reshape(b, n, self.num_heads, head_dim).transpose(1, 2)
        k = k.reshape(b, -1, self.num_heads, head_dim).transpose(1, 2)
        v = v.reshape(b, -1, self.num_heads, head_dim).transpose(1, 2)

        attn = F.softmax(q @ k.transpose(-1, -2) / math.sqrt(head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return x + self.to_out(out).transpose(1, 2).reshape(b, c, *spatial)


class ConditionalUNet3D(nn.Module):
    def __init__(self, cfg: DenoiserConfig | None = None, in_channels: int = 4):
        super().__init__()
        self.cfg = cfg = cfg or DenoiserConfig()
        cfg.validate()
        widths = cfg.channel_widths
        levels = len(widths)
        attn_levels = set(cfg.attention_levels())
        t_dim = cfg.time_embed_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(t_dim, t_dim * 2), nn.SiLU(), nn.Linear(t_dim * 2, t_dim)
        )
        self.stem = nn.Conv3d(in_channels, widths[0], 3, padding=1)

        def attn(width):
            return CrossAttention3d(width, cfg.context_dim, cfg.num_heads)

        self.down_blocks = nn.ModuleList()
        self.down_attns = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        ch = widths[0]
        for i, width in enumerate(widths):
            self.down_blocks.append(TimeResBlock(ch, width, t_dim))
            self.down_attns.append(attn(width) if i in attn_levels else None)
            self.downsamplers.append(
                nn.Conv3d(width, width, 3, stride=2, padding=1) if i < levels - 1 else None
            )
            ch = width

        self.mid_block1 = TimeResBlock(widths[-1], widths[-1], t_dim)
        self.mid_attn = attn(widths[-1])
        self.mid_block2 = TimeResBlock(widths[-1], widths[-1], t_dim)

        self.up_blocks = nn.ModuleList()
        self.up_attns = nn.ModuleList()
        self.up_after = []
        for i, width in reversed(list(enumerate(widths))):
            self.up_blocks.append(TimeResBlock(ch + width, width, t_dim))
            self.up_attns.append(attn(width) if i in attn_levels else None)
            self.up_after.append(i > 0)
            ch = width

        self.out_norm = _group_norm(widths[0])
        self.out_conv = nn.Conv3d(widths[0], in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """x: (B, 4, X, Y, Z); t: (B,) in [0, 1]; context: (B, tokens, context_dim)."""
        t_emb = self.time_mlp(timestep_embedding(t, self.cfg.time_embed_dim))

        h = self.stem(x)
        skips = []
        for block, attn, down in zip(self.down_blocks, self.down_attns, self.downsamplers):
            h = block(h, t_emb)
            if attn is not None:
                h = attn(h, context)
            skips.append(h)
            if down is not None:
                h = down(h)

        h = self.mid_block1(h, t_emb)
        h = self.mid_attn(h, context)
        h = self.mid_block2(h, t_emb)

        for block, attn, upsample in zip(self.up_blocks, self.up_attns, self.up_after):
            skip = skips.pop()
            if h.shape[2:] != skip.shape[2:]:
                # Odd extents round down on the way in; snap back onto the skip grid.
                h = F.interpolate(h, size=skip.shape[2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), t_emb)
            if attn is not None:
                h = attn(h, context)
            if upsample:
                h = F.interpolate(h, scale_factor=2, mode="nearest")

        return self.out_conv(F.silu(self.out_norm(h)))
