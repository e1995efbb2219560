from __future__ import annotations

import torch
import torch.nn as nn

from .configs import DiTConfig
from .layers import Attention, TimestepMLP, timestep_embedding

DUMMY_LABEL = 0


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class DiTBlock(nn.Module):
    """Transformer layer with adaLN-Zero conditioning on the (timestep, label) embedding."""

    def __init__(self, hidden: int, heads: int, mlp_ratio: float, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(hidden, heads, hidden // heads, qkv_bias=True, dropout=dropout)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        mlp_hidden = int(hidden * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, mlp_hidden),
            nn.GELU(approximate="tanh"),
            nn.Dropout(dropout),
            nn.Linear(mlp_hidden, hidden),
            nn.Dropout(dropout),
        )
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 6 * hidden))
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def forward(self, x, c):
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.adaLN_modulation(c).chunk(6, dim=1)
        x = x + gate_msa.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_msa, scale_msa))
        return x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))


class FinalLayer(nn.Module):
    def __init__(self, hidden: int, patch: int, out_channels: int):
        super().__init__()
        self.norm_final = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(hidden, patch * patch * out_channels)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 2 * hidden))
        for layer in (self.linear, self.adaLN_modulation[-1]):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x, c):
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=1)
        return self.linear(modulate(self.norm_final(x), shift, scale))


class DiT(nn.Module):
    """Unconditional diffusion transformer.

    The class-label pathway is kept but only the dummy label 0 exists, which
    turns the class-conditional design into an unconditional model.
    """

    def __init__(self, config: DiTConfig):
        super().__init__()
        self.config = config
        self.context_dim = None
        c = config
        self.x_embedder = nn.Conv2d(c.in_channels, c.hidden_dim, c.patch_size, stride=c.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, c.n_tokens, c.hidden_dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.t_embedder = TimestepMLP(256, c.hidden_dim)
        self.y_embedder = nn.Embedding(1, c.hidden_dim)
        nn.init.normal_(self.y_embedder.weight, std=0.02)
        self.blocks = nn.ModuleList(DiTBlock(c.hidden_dim, c.n_heads, c.mlp_ratio, c.dropout) for _ in range(c.n_layers))
        self.final_layer = FinalLayer(c.hidden_dim, c.patch_size, c.in_channels)

    def patchify(self, x):
        return self.x_embedder(x).flatten(2).transpose(1, 2)

    def unpatchify(self, tokens):
        c, p = self.config.in_channels, self.config.patch_size
        g = self.config.input_size // p
        x = tokens.reshape(tokens.shape[0], g, g, p, p, c)
        x = torch.einsum("nhwpqc->nchpwq", x)
        return x.reshape(tokens.shape[0], c, g * p, g * p)

    def forward(self, x, t, context=None, labels=None):
        if context is not None:
            raise ValueError("DiT is unconditional; context must be None")
        if x.shape[-1] != self.config.input_size or x.shape[-2] != self.config.input_size:
            raise ValueError(f"expected {self.config.input_size}x{self.config.input_size} input")
        if labels is None:
            labels = torch.full((x.shape[0],), DUMMY_LABEL, dtype=torch.long, device=x.device)
        elif torch.any(torch.as_tensor(labels) != DUMMY_LABEL):
            raise ValueError(f"only the dummy label {DUMMY_LABEL} is valid in unconditional mode")
        t = torch.as_tensor(t, device=x.device)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        c = self.t_embedder(timestep_embedding(t, 256).to(x.dtype)) + self.y_embedder(labels)
        h = self.patchify(x) + self.pos_embed
        for block in self.blocks:
            h = block(h, c)
        return self.unpatchify(self.final_layer(h, c))


def build_dit(config: DiTConfig) -> DiT:
    return DiT(config)
