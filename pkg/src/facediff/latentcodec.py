"""Image <-> latent codecs.

``IdentityDownscaleCodec`` is exact and training-free: block averaging, then
RGB channels tiled cyclically across the latent channels (latent channel c
copies RGB channel c mod 3). Decoding upsamples by nearest neighbour and
averages the latent channels belonging to each RGB channel, so
encode(decode(encode(x))) == encode(x).

``ConvAutoencoder`` is a small trainable stand-in for a frozen pretrained
autoencoder with a plain (non-quantized) bottleneck.
"""

from __future__ import annotations

import enum
import math
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, PositiveInt, field_validator

RANGE_TOL = 1e-4


class CodecKind(str, enum.Enum):
    IDENTITY_DOWNSCALE = "identity_downscale"
    CONV_AE = "conv_ae"


class CodecSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: CodecKind = CodecKind.IDENTITY_DOWNSCALE
    downsample_factor: Literal[4, 8] = 4
    latent_channels: PositiveInt = 4
    image_size: PositiveInt = 256
    hidden_channels: PositiveInt = 64
    train_steps: int = 0

    @field_validator("image_size")
    @classmethod
    def _divisible(cls, v, info):
        f = info.data.get("downsample_factor", 4)
        if v % f:
            raise ValueError(f"image_size {v} not divisible by factor {f}")
        return v

    @property
    def latent_size(self) -> int:
        return self.image_size // self.downsample_factor


class Codec(nn.Module):
    def __init__(self, spec: CodecSpec):
        super().__init__()
        self.spec = spec
        self.frozen = False

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.spec.latent_channels, self.spec.latent_size, self.spec.latent_size)

    def _check_image(self, x: torch.Tensor):
        s = self.spec.image_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[-2:] != (s, s):
            raise ValueError(f"expected N x 3 x {s} x {s} images, got {tuple(x.shape)}")
        if x.min() < -1 - RANGE_TOL or x.max() > 1 + RANGE_TOL:
            raise ValueError("images must be in [-1, 1]")

    def _check_latent(self, z: torch.Tensor):
        if z.ndim != 4 or tuple(z.shape[1:]) != self.latent_shape:
            raise ValueError(f"expected N x {self.latent_shape} latents, got {tuple(z.shape)}")

    def freeze(self):
        self.frozen = True
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        return self._encode(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        self._check_latent(z)
        return self._decode(z).clamp(-1.0, 1.0)


class IdentityDownscaleCodec(Codec):
    def __init__(self, spec: CodecSpec):
        super().__init__(spec)
        self.frozen = True

    def _encode(self, x):
        pooled = F.avg_pool2d(x, self.spec.downsample_factor)
        idx = torch.arange(self.spec.latent_channels) % 3
        return pooled[:, idx]

    def _decode(self, z):
        f = self.spec.downsample_factor
        up = z.repeat_interleave(f, dim=2).repeat_interleave(f, dim=3)
        group = torch.arange(self.spec.latent_channels) % 3
        return torch.stack([up[:, group == k].mean(dim=1) for k in range(3)], dim=1)


class ConvAutoencoder(Codec):
    """Three strided conv layers each way; log2(factor) of them change resolution."""

    def __init__(self, spec: CodecSpec):
        super().__init__(spec)
        n_stride = int(math.log2(spec.downsample_factor))
        h = spec.hidden_channels
        strides = [2 if i < n_stride else 1 for i in range(3)]
        chans = [3, h, h, spec.latent_channels]
        enc = []
        for i, s in enumerate(strides):
            enc.append(nn.Conv2d(chans[i], chans[i + 1], 4 if s == 2 else 3, stride=s, padding=1))
            if i < 2:
                enc.append(nn.SiLU())
        self.encoder = nn.Sequential(*enc)
        dec = []
        rchans = list(reversed(chans))
        for i, s in enumerate(reversed(strides)):
            if s == 2:
                dec.append(nn.ConvTranspose2d(rchans[i], rchans[i + 1], 4, stride=2, padding=1))
            else:
                dec.append(nn.Conv2d(rchans[i], rchans[i + 1], 3, padding=1))
            if i < 2:
                dec.append(nn.SiLU())
        self.decoder = nn.Sequential(*dec)

    def _encode(self, x):
        return self.encoder(x)

    def _decode(self, z):
        return self.decoder(z)

    def reconstruct(self, x):
        """Unclamped reconstruction, used as the training target path."""
        return self.decoder(self.encoder(x))


def make_codec(spec: CodecSpec) -> Codec:
    if spec.kind is CodecKind.IDENTITY_DOWNSCALE:
        return IdentityDownscaleCodec(spec)
    return ConvAutoencoder(spec)


def encode(codec: Codec, image: torch.Tensor) -> torch.Tensor:
    return codec.encode(image)


def decode(codec: Codec, latent: torch.Tensor) -> torch.Tensor:
    return codec.decode(latent)


def reconstruction_mse(codec: Codec, images: torch.Tensor) -> float:
    with torch.no_grad():
        return float(F.mse_loss(codec.decode(codec.encode(images)), images))


def train_codec(codec: Codec, images: torch.Tensor, steps: int, lr: float = 2e-3,
                batch_size: int = 8, seed: int = 0) -> Codec:
    """Fit a ``ConvAutoencoder`` on reconstruction MSE, then freeze it."""
    if not isinstance(codec, ConvAutoencoder):
        raise TypeError("only conv_ae codecs are trainable")
    if codec.frozen:
        raise RuntimeError("codec is already frozen")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    codec.train()
    n = len(images)
    for _ in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        batch = images[idx]
        loss = F.mse_loss(codec.reconstruct(batch), batch)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return codec.freeze()
