"""Attribute and segmentation conditioning.

An MLP embeds 40-bit attribute vectors and is trained with a multi-positive
InfoNCE loss whose positives are pairs of attribute vectors with cosine
similarity above a threshold. A strided convolutional encoder turns the
ten part masks into a pooled segmentation embedding, and a linear projector
fuses both into the cross-attention context.
"""

from __future__ import annotations

import enum
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, model_validator

from .dataio import N_ATTRIBUTES, PART_NAMES

N_PARTS = len(PART_NAMES)
ZERO_GUARD = 1e-8


class ConditioningMode(str, enum.Enum):
    ATTR_ONLY = "attr_only"
    ATTR_PLUS_SEG = "attr_plus_seg"


class InfoNCEParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    tau: float = Field(0.07, gt=0)
    threshold: float = Field(0.8, gt=0, le=1)
    zero_vector_mode: Literal["strict", "lenient"] = "strict"


class ConditioningConfig(BaseModel):
    """Embedding widths. The default joint layout is 256 + 256 -> 256."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    attr_dim: PositiveInt = 256
    attr_hidden: PositiveInt = 128
    seg_dim: PositiveInt = 256
    context_dim: PositiveInt = 256
    seg_stage_widths: tuple[PositiveInt, ...] = (32, 64, 160, 256)
    infonce: InfoNCEParams = InfoNCEParams()

    @model_validator(mode="after")
    def _check(self):
        if len(self.seg_stage_widths) < 1:
            raise ValueError("segmentation encoder needs at least one stage")
        return self


class AttributeEmbedder(nn.Module):
    def __init__(self, out_dim: int = 256, hidden: int = 128, in_dim: int = N_ATTRIBUTES):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.SiLU(), nn.Linear(hidden, out_dim))

    def forward(self, a: torch.Tensor) -> torch.Tensor:
        if a.ndim != 2 or a.shape[1] != self.in_dim:
            raise ValueError(f"expected attribute batch of width {self.in_dim}, got {tuple(a.shape)}")
        return self.net(a.to(self.net[0].weight.dtype))


def embed_attributes(embedder: AttributeEmbedder, a: torch.Tensor) -> torch.Tensor:
    return embedder(a)


def _cosine_matrix(x: torch.Tensor, guard: float = 0.0) -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True)
    if guard:
        norms = norms.clamp_min(guard)
    unit = x / norms
    return unit @ unit.T


def attribute_similarity_mask(a: torch.Tensor, threshold: float = 0.8, mode: str = "strict") -> torch.Tensor:
    """Boolean B x B mask of positive pairs: cos(a_i, a_j) > threshold, i != j.

    All-zero rows have no direction; ``mode="strict"`` rejects them and
    ``mode="lenient"`` guards the norm so they match nothing.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    a = a.to(torch.float64)
    zero_rows = a.abs().sum(dim=1) == 0
    if zero_rows.any():
        if mode == "strict":
            raise ValueError(f"all-zero attribute rows at {zero_rows.nonzero().flatten().tolist()}")
        if mode != "lenient":
            raise ValueError(f"unknown zero-vector mode {mode!r}")
    cos = _cosine_matrix(a, guard=ZERO_GUARD)
    mask = cos > threshold
    mask.fill_diagonal_(False)
    return mask


def info_nce_loss(z: torch.Tensor, mask: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """Multi-positive InfoNCE over cosine similarities of ``z`` (B x D).

    For each anchor i the numerator sums exp(sim/tau) over its positives and
    the denominator over every k != i. Anchors without positives add zero; the
    sum is still divided by the full batch size B.
    """
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("need a batch of at least two embeddings")
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not torch.isfinite(z).all():
        raise ValueError("embeddings contain non-finite values")
    b = z.shape[0]
    mask = mask.to(torch.bool)
    if mask.shape != (b, b):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match batch {b}")

    logits = _cosine_matrix(z, guard=ZERO_GUARD) / tau
    off_diag = ~torch.eye(b, dtype=torch.bool, device=z.device)
    pos = mask & off_diag
    neg_inf = torch.finfo(logits.dtype).min
    # logsumexp subtracts the per-row max internally.
    log_den = torch.logsumexp(logits.masked_fill(~off_diag, neg_inf), dim=1)
    log_num = torch.logsumexp(logits.masked_fill(~pos, neg_inf), dim=1)
    has_pos = pos.any(dim=1)
    per_row = torch.where(has_pos, log_den - log_num, torch.zeros_like(log_den))
    return per_row.sum() / b


def skipped_rows(mask: torch.Tensor) -> int:
    """Number of anchors without any positive partner."""
    m = mask.to(torch.bool).clone()
    m.fill_diagonal_(False)
    return int((~m.any(dim=1)).sum())


class SegmentationEncoder(nn.Module):
    """Hierarchical strided-conv encoder over the stacked part masks.

    Stage one downsamples by 4 with an overlapping 7x7 patch embedding,
    later stages by 2, mirroring the SegFormer stage layout.
    """

    def __init__(self, in_channels: int = N_PARTS, widths=(32, 64, 160, 256)):
        super().__init__()
        stages = []
        prev = in_channels
        for i, w in enumerate(widths):
            k, s, p = (7, 4, 3) if i == 0 else (3, 2, 1)
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, w, k, stride=s, padding=p),
                    nn.GroupNorm(1, w),
                    nn.GELU(),
                    nn.Conv2d(w, w, 3, padding=1),
                    nn.GroupNorm(1, w),
                    nn.GELU(),
                )
            )
            prev = w
        self.stages = nn.Sequential(*stages)
        self.out_channels = prev

    def forward(self, m):
        return self.stages(m)


class SegmentationEmbedder(nn.Module):
    def __init__(self, out_dim: int = 128, widths=(32, 64, 160, 256), in_channels: int = N_PARTS):
        super().__init__()
        self.in_channels = in_channels
        self.encoder = SegmentationEncoder(in_channels, widths)
        self.proj = nn.Linear(self.encoder.out_channels, out_dim)

    def pool(self, m: torch.Tensor) -> torch.Tensor:
        if m.ndim != 4 or m.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels}-channel mask stacks, got {tuple(m.shape)}")
        return self.encoder(m.to(self.proj.weight.dtype)).mean(dim=(2, 3))

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        return self.proj(self.pool(m))


def embed_segmentation(embedder: SegmentationEmbedder, m: torch.Tensor) -> torch.Tensor:
    return embedder(m)


def fuse(attr_emb: torch.Tensor, seg_emb: torch.Tensor | None, projector: nn.Linear | None,
         mode: ConditioningMode | str = ConditioningMode.ATTR_PLUS_SEG) -> torch.Tensor:
    """Concatenate and project to the context width; attribute-only mode passes the attribute embedding through."""
    mode = ConditioningMode(mode)
    if mode is ConditioningMode.ATTR_ONLY:
        return attr_emb
    if seg_emb is None or projector is None:
        raise ValueError("attribute+segmentation fusion needs a segmentation embedding and a projector")
    joint = torch.cat([attr_emb, seg_emb], dim=1)
    if joint.shape[1] != projector.in_features:
        raise ValueError(f"fused width {joint.shape[1]} != projector input {projector.in_features}")
    return projector(joint)


class Conditioner(nn.Module):
    """Produces the cross-attention context and the attribute embedding used by InfoNCE."""

    def __init__(self, config: ConditioningConfig, mode: ConditioningMode | str):
        super().__init__()
        self.config = config
        self.mode = ConditioningMode(mode)
        self.attr_embedder = AttributeEmbedder(config.attr_dim, config.attr_hidden)
        if self.mode is ConditioningMode.ATTR_PLUS_SEG:
            self.seg_embedder = SegmentationEmbedder(config.seg_dim, config.seg_stage_widths)
            self.projector = nn.Linear(config.attr_dim + config.seg_dim, config.context_dim)
        else:
            self.seg_embedder = None
            self.projector = None

    @property
    def context_dim(self) -> int:
        return self.config.attr_dim if self.mode is ConditioningMode.ATTR_ONLY else self.config.context_dim

    def forward(self, attrs: torch.Tensor, masks: torch.Tensor | None = None):
        z = self.attr_embedder(attrs)
        if self.mode is ConditioningMode.ATTR_ONLY:
            return z, z
        if masks is None:
            raise ValueError("attribute+segmentation conditioning needs mask stacks")
        s = self.seg_embedder(masks)
        return fuse(z, s, self.projector, self.mode), z
