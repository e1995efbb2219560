"""Declarative denoiser configs and the named architecture presets."""

from __future__ import annotations

import enum
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, PositiveInt, model_validator


class BlockKind(str, enum.Enum):
    DOWN = "down"
    ATTN_DOWN = "attn_down"
    CROSS_ATTN_DOWN = "cross_attn_down"
    UP = "up"
    ATTN_UP = "attn_up"
    CROSS_ATTN_UP = "cross_attn_up"

    @property
    def is_down(self) -> bool:
        return self in (BlockKind.DOWN, BlockKind.ATTN_DOWN, BlockKind.CROSS_ATTN_DOWN)

    @property
    def has_self_attention(self) -> bool:
        return self in (BlockKind.ATTN_DOWN, BlockKind.ATTN_UP)

    @property
    def has_cross_attention(self) -> bool:
        return self in (BlockKind.CROSS_ATTN_DOWN, BlockKind.CROSS_ATTN_UP)


_UP_OF = {
    BlockKind.DOWN: BlockKind.UP,
    BlockKind.ATTN_DOWN: BlockKind.ATTN_UP,
    BlockKind.CROSS_ATTN_DOWN: BlockKind.CROSS_ATTN_UP,
}


class BlockSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: BlockKind
    out_channels: PositiveInt


class UNetConfig(BaseModel):
    """A UNet built from down/up block lists.

    Up blocks run from the deepest level back to full resolution, so
    ``up_blocks[i]`` carries the channels of ``down_blocks[-1 - i]``.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    type: Literal["unet"] = "unet"
    input_size: PositiveInt
    in_channels: PositiveInt
    down_blocks: tuple[BlockSpec, ...]
    up_blocks: tuple[BlockSpec, ...]
    context_dim: Optional[PositiveInt] = None
    layers_per_block: PositiveInt = 2
    norm_groups: PositiveInt = 32
    attention_head_dim: PositiveInt = 8
    cross_attention_heads: PositiveInt = 8
    dropout: float = 0.0

    @model_validator(mode="after")
    def _check(self):
        if not self.down_blocks:
            raise ValueError("at least one block is required")
        if len(self.down_blocks) != len(self.up_blocks):
            raise ValueError("down_blocks and up_blocks must have equal length")
        if not all(b.kind.is_down for b in self.down_blocks):
            raise ValueError("down_blocks may only contain down kinds")
        if any(b.kind.is_down for b in self.up_blocks):
            raise ValueError("up_blocks may only contain up kinds")
        for i, up in enumerate(self.up_blocks):
            if up.out_channels != self.down_blocks[-1 - i].out_channels:
                raise ValueError(f"up block {i} channels must mirror down block {len(self.down_blocks) - 1 - i}")
        n_down = len(self.down_blocks) - 1
        if self.input_size % (2**n_down):
            raise ValueError(f"input_size {self.input_size} not divisible by 2**{n_down}")
        for b in self.down_blocks:
            if b.out_channels % self.norm_groups:
                raise ValueError(f"{b.out_channels} channels not divisible by {self.norm_groups} norm groups")
        if self.has_cross_attention != (self.context_dim is not None):
            raise ValueError("context_dim must be set exactly when a cross-attention block is present")
        return self

    @property
    def has_cross_attention(self) -> bool:
        return any(b.kind.has_cross_attention for b in (*self.down_blocks, *self.up_blocks))

    @property
    def block_out_channels(self) -> tuple[int, ...]:
        return tuple(b.out_channels for b in self.down_blocks)

    @property
    def out_channels(self) -> int:
        return self.in_channels


class DiTConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    type: Literal["dit"] = "dit"
    input_size: PositiveInt
    in_channels: PositiveInt = 3
    patch_size: PositiveInt
    hidden_dim: PositiveInt
    n_layers: PositiveInt
    n_heads: PositiveInt
    dropout: float = 0.0
    mlp_ratio: float = 4.0

    @model_validator(mode="after")
    def _check(self):
        if self.input_size % self.patch_size:
            raise ValueError(f"input_size {self.input_size} not divisible by patch_size {self.patch_size}")
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        return self

    @property
    def n_tokens(self) -> int:
        return (self.input_size // self.patch_size) ** 2

    @property
    def context_dim(self) -> None:
        return None


_ABBREV_DOWN = {"D": BlockKind.DOWN, "CA": BlockKind.ATTN_DOWN}
_ABBREV_UP = {"U": BlockKind.UP, "CA": BlockKind.ATTN_UP}


def _shorthand_unet(size, down: str, up: str, channels) -> UNetConfig:
    """Unconditional UNet from block shorthand; "CA" marks a self-attention block here."""
    down_kinds = [_ABBREV_DOWN[k.strip()] for k in down.split(",")]
    up_kinds = [_ABBREV_UP[k.strip()] for k in up.split(",")]
    return UNetConfig(
        input_size=size,
        in_channels=3,
        down_blocks=[BlockSpec(kind=k, out_channels=c) for k, c in zip(down_kinds, channels)],
        up_blocks=[BlockSpec(kind=k, out_channels=c) for k, c in zip(up_kinds, reversed(channels))],
    )


def _latent_cond_unet(down_kinds: list[BlockKind], channels, context_dim: int = 256) -> UNetConfig:
    # Up path mirrors the down path level by level.
    return UNetConfig(
        input_size=64,
        in_channels=4,
        down_blocks=[BlockSpec(kind=k, out_channels=c) for k, c in zip(down_kinds, channels)],
        up_blocks=[BlockSpec(kind=_UP_OF[k], out_channels=c) for k, c in zip(reversed(down_kinds), reversed(channels))],
        context_dim=context_dim,
    )


D, X = BlockKind.DOWN, BlockKind.CROSS_ATTN_DOWN
_C6 = (128, 128, 256, 256, 512, 512)

PRESETS = {
    "unet_r3": lambda: _shorthand_unet(128, "D, D, CA, D, CA, D", "U, CA, U, U, CA, U", (128, 256, 256, 512, 512, 1024)),
    "unet_r5": lambda: _shorthand_unet(128, "D, D, D, D, CA, D", "U, CA, U, U, U, U", (128, 128, 256, 256, 512, 512)),
    "unet_r6": lambda: _shorthand_unet(128, "D, CA, CA, D", "U, CA, CA, U", (160, 320, 640, 640)),
    "dit_small": lambda: DiTConfig(input_size=128, patch_size=4, hidden_dim=512, n_layers=6, n_heads=8, dropout=0.1),
    "dit_large": lambda: DiTConfig(input_size=128, patch_size=4, hidden_dim=768, n_layers=12, n_heads=12, dropout=0.2),
    "lc_unet_base": lambda: _latent_cond_unet([D, D, D, D, X, D], _C6),
    "lc_unet_3": lambda: _latent_cond_unet([D, X, D, D, D], (128, 128, 256, 512, 512)),
    "lc_unet_5": lambda: _latent_cond_unet([D, D, D, D, X, X], _C6),
    "lc_unet_6": lambda: _latent_cond_unet([X, X, D, D, D, D], _C6),
}

# Parameter counts reported for the latent conditional variants.
REPORTED_PARAMS_M = {
    "lc_unet_base": 140.45,
    "lc_unet_3": 104.95,
    "lc_unet_5": 168.04,
    "lc_unet_6": 116.84,
}


def preset(name: str) -> UNetConfig | DiTConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def resolve_arch(arch) -> UNetConfig | DiTConfig:
    """Turn a preset name, a preset-plus-overrides mapping or an inline mapping into a config."""
    if isinstance(arch, (UNetConfig, DiTConfig)):
        return arch
    if isinstance(arch, str):
        return preset(arch)
    arch = dict(arch)
    if "preset" in arch:
        base = preset(arch.pop("preset"))
        merged = {**base.model_dump(), **arch}
        return type(base).model_validate(merged)
    kind = arch.get("type", "unet")
    if kind == "unet":
        return UNetConfig.model_validate(arch)
    if kind == "dit":
        return DiTConfig.model_validate(arch)
    raise ValueError(f"unknown architecture type {kind!r}")
