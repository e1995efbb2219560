from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .configs import BlockKind, UNetConfig
from .layers import (
    Downsample,
    ResnetBlock,
    SpatialSelfAttention,
    SpatialTransformer,
    TimestepMLP,
    Upsample,
    timestep_embedding,
)


def _attention(kind: BlockKind, channels: int, cfg: UNetConfig) -> nn.Module | None:
    if kind.has_self_attention:
        return SpatialSelfAttention(channels, cfg.norm_groups, cfg.attention_head_dim)
    if kind.has_cross_attention:
        return SpatialTransformer(channels, cfg.norm_groups, cfg.cross_attention_heads, cfg.context_dim, cfg.dropout)
    return None


class DownBlock(nn.Module):
    def __init__(self, kind, in_ch, out_ch, temb_dim, cfg: UNetConfig, add_downsample: bool):
        super().__init__()
        self.resnets = nn.ModuleList(
            ResnetBlock(in_ch if i == 0 else out_ch, out_ch, temb_dim, cfg.norm_groups, cfg.dropout)
            for i in range(cfg.layers_per_block)
        )
        attn = [_attention(kind, out_ch, cfg) for _ in range(cfg.layers_per_block)]
        self.attentions = nn.ModuleList(attn) if attn[0] is not None else None
        self.downsample = Downsample(out_ch) if add_downsample else None

    def forward(self, x, temb, context):
        skips = []
        for i, resnet in enumerate(self.resnets):
            x = resnet(x, temb)
            if self.attentions is not None:
                x = self.attentions[i](x, context)
            skips.append(x)
        if self.downsample is not None:
            x = self.downsample(x)
            skips.append(x)
        return x, skips


class UpBlock(nn.Module):
    def __init__(self, kind, prev_ch, out_ch, skip_in_ch, temb_dim, cfg: UNetConfig, add_upsample: bool):
        super().__init__()
        n = cfg.layers_per_block + 1
        resnets = []
        for i in range(n):
            skip_ch = skip_in_ch if i == n - 1 else out_ch
            res_in = prev_ch if i == 0 else out_ch
            resnets.append(ResnetBlock(res_in + skip_ch, out_ch, temb_dim, cfg.norm_groups, cfg.dropout))
        self.resnets = nn.ModuleList(resnets)
        attn = [_attention(kind, out_ch, cfg) for _ in range(n)]
        self.attentions = nn.ModuleList(attn) if attn[0] is not None else None
        self.upsample = Upsample(out_ch) if add_upsample else None

    def forward(self, x, skips, temb, context):
        for i, resnet in enumerate(self.resnets):
            x = resnet(torch.cat([x, skips.pop()], dim=1), temb)
            if self.attentions is not None:
                x = self.attentions[i](x, context)
        if self.upsample is not None:
            x = self.upsample(x)
        return x


class MidBlock(nn.Module):
    def __init__(self, channels, temb_dim, cfg: UNetConfig):
        super().__init__()
        kind = BlockKind.CROSS_ATTN_DOWN if cfg.context_dim is not None else BlockKind.ATTN_DOWN
        self.resnets = nn.ModuleList(ResnetBlock(channels, channels, temb_dim, cfg.norm_groups, cfg.dropout) for _ in range(2))
        self.attention = _attention(kind, channels, cfg)

    def forward(self, x, temb, context):
        x = self.resnets[0](x, temb)
        x = self.attention(x, context)
        return self.resnets[1](x, temb)


class UNet(nn.Module):
    """Epsilon-prediction UNet assembled from a :class:`UNetConfig`.

    Every block holds ``layers_per_block`` residual units (one more on the
    up path, which also consumes the skip connections). The output
    convolution starts at zero so the untrained network predicts zero noise.
    """

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        chans = config.block_out_channels
        temb_dim = chans[0] * 4
        self.context_dim = config.context_dim

        self.time_embedding = TimestepMLP(chans[0], temb_dim)
        self.conv_in = nn.Conv2d(config.in_channels, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        skip_channels = [chans[0]]
        in_ch = chans[0]
        for i, spec in enumerate(config.down_blocks):
            last = i == len(chans) - 1
            self.down_blocks.append(DownBlock(spec.kind, in_ch, spec.out_channels, temb_dim, config, not last))
            skip_channels += [spec.out_channels] * (config.layers_per_block + (0 if last else 1))
            in_ch = spec.out_channels

        self.mid_block = MidBlock(chans[-1], temb_dim, config)

        rev = list(reversed(chans))
        self.up_blocks = nn.ModuleList()
        prev_ch = rev[0]
        for i, spec in enumerate(config.up_blocks):
            skip_in = rev[min(i + 1, len(rev) - 1)]
            last = i == len(rev) - 1
            self.up_blocks.append(UpBlock(spec.kind, prev_ch, spec.out_channels, skip_in, temb_dim, config, not last))
            prev_ch = spec.out_channels

        self.conv_norm_out = nn.GroupNorm(config.norm_groups, chans[0])
        self.conv_out = nn.Conv2d(chans[0], config.out_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def _check_context(self, x, context):
        if self.context_dim is None:
            if context is not None:
                raise ValueError("this UNet has no cross-attention; context must be None")
            return None
        if context is None:
            raise ValueError(f"context of width {self.context_dim} is required")
        if context.ndim == 2:
            context = context[:, None, :]
        if context.ndim != 3 or context.shape[0] != x.shape[0] or context.shape[-1] != self.context_dim:
            raise ValueError(
                f"context must be (batch={x.shape[0]}, tokens, {self.context_dim}), got {tuple(context.shape)}"
            )
        return context.to(x.dtype)

    def forward(self, x: torch.Tensor, t, context: torch.Tensor | None = None) -> torch.Tensor:
        context = self._check_context(x, context)
        t = torch.as_tensor(t, device=x.device)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        temb = self.time_embedding(timestep_embedding(t, self.config.block_out_channels[0]).to(x.dtype))

        h = self.conv_in(x)
        skips = [h]
        for block in self.down_blocks:
            h, block_skips = block(h, temb, context)
            skips += block_skips
        h = self.mid_block(h, temb, context)
        for block in self.up_blocks:
            h = block(h, skips, temb, context)
        return self.conv_out(F.silu(self.conv_norm_out(h)))


def build_unet(config: UNetConfig) -> UNet:
    return UNet(config)
