"""Frechet distance between Gaussian fits of image features (FID).

The default extractor is a randomly initialised convolutional network frozen
under a fixed seed. Absolute values therefore differ from Inception-based
FID; ``InceptionExtractor`` plugs in torchvision's InceptionV3 when its
weights are available.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

COV_EPS = 1e-6
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray
    extractor_id: str

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be N x D")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")

    def __len__(self):
        return len(self.features)


@dataclass(frozen=True)
class GaussianMoments:
    mu: np.ndarray
    sigma: np.ndarray


class RandomConvExtractor(nn.Module):
    """Frozen random conv net; features are channel means and stds of the last two stages."""

    def __init__(self, seed: int = 0, widths=(32, 64, 128, 128), input_size: int = 64):
        super().__init__()
        self.seed = seed
        self.input_size = input_size
        gen = torch.Generator().manual_seed(seed)
        layers = []
        prev = 3
        for w in widths:
            conv = nn.Conv2d(prev, w, 3, stride=2, padding=1)
            with torch.no_grad():
                bound = (6.0 / (prev * 9)) ** 0.5
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
                conv.bias.zero_()
            layers.append(conv)
            prev = w
        self.convs = nn.ModuleList(layers)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.extractor_id = f"random_conv_s{seed}_" + "-".join(map(str, widths))
        self.dim = 2 * (widths[-1] + widths[-2])

    @torch.no_grad()
    def forward(self, x):
        x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        x = x * 2 - 1
        feats = []
        for i, conv in enumerate(self.convs):
            x = F.leaky_relu(conv(x), 0.2)
            if i >= len(self.convs) - 2:
                feats += [x.mean(dim=(2, 3)), x.std(dim=(2, 3), unbiased=False)]
        return torch.cat(feats, dim=1)


class PixelExtractor(nn.Module):
    """Downsampled raw pixels; a transparent baseline."""

    def __init__(self, size: int = 8):
        super().__init__()
        self.size = size
        self.extractor_id = f"pixel{size}"

    @torch.no_grad()
    def forward(self, x):
        return F.adaptive_avg_pool2d(x, self.size).flatten(1)


class InceptionExtractor(nn.Module):
    """torchvision InceptionV3 pool features at 299x299 (2048-d)."""

    def __init__(self):
        super().__init__()
        from torchvision.models import Inception_V3_Weights, inception_v3

        net = inception_v3(weights=Inception_V3_Weights.DEFAULT, aux_logits=True)
        net.fc = nn.Identity()
        self.net = net.eval()
        self.extractor_id = "inception_v3_tv"
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)

    @torch.no_grad()
    def forward(self, x):
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        return self.net((x - self.mean) / self.std)


EXTRACTORS = {
    "random_conv": RandomConvExtractor,
    "pixel": PixelExtractor,
    "inception": InceptionExtractor,
}


def get_extractor(name: str) -> nn.Module:
    try:
        return EXTRACTORS[name]()
    except KeyError:
        raise KeyError(f"unknown extractor {name!r}; choose from {sorted(EXTRACTORS)}") from None


def load_image_dir(directory, size: int | None = None) -> torch.Tensor:
    """All images in ``directory`` (sorted by name) as N x 3 x H x W in [0, 1]."""
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ValueError(f"no images found in {directory}")
    arrays = []
    for p in paths:
        img = Image.open(p).convert("RGB")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.Resampling.BILINEAR)
        arrays.append(np.asarray(img, dtype=np.float32) / 255.0)
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"images in {directory} differ in size; pass size=")
    return torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).contiguous()


def extract_features(extractor, images: torch.Tensor, batch_size: int = 64) -> FeatureSet:
    """Features for N x 3 x H x W images in [0, 1]."""
    if len(images) == 0:
        raise ValueError("no images to extract features from")
    chunks = [extractor(images[i : i + batch_size].float()) for i in range(0, len(images), batch_size)]
    feats = torch.cat(chunks).double().cpu().numpy()
    return FeatureSet(feats, getattr(extractor, "extractor_id", type(extractor).__name__))


def gaussian_stats(fs: FeatureSet | np.ndarray) -> GaussianMoments:
    x = fs.features if isinstance(fs, FeatureSet) else np.asarray(fs, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least two feature rows for a covariance")
    return GaussianMoments(x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False)))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def trace_sqrt_product(sigma1: np.ndarray, sigma2: np.ndarray) -> float:
    """Tr((S1 S2)^(1/2)) through the symmetric form S1^(1/2) S2 S1^(1/2)."""
    root1 = _psd_sqrt(sigma1)
    inner = root1 @ sigma2 @ root1
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    return float(np.sqrt(np.clip(vals, 0, None)).sum())


def frechet_distance(m1: GaussianMoments, m2: GaussianMoments, eps: float = COV_EPS) -> float:
    mu1, mu2 = np.atleast_1d(m1.mu), np.atleast_1d(m2.mu)
    s1, s2 = np.atleast_2d(m1.sigma), np.atleast_2d(m2.sigma)
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (mu1.size, mu1.size):
        raise ValueError("moment dimensions do not match")
    # Only near-singular covariances are regularised, so well-conditioned inputs keep the exact distance.
    if min(np.linalg.eigvalsh((s1 + s1.T) / 2).min(), np.linalg.eigvalsh((s2 + s2.T) / 2).min()) < eps:
        offset = eps * np.eye(mu1.size)
        s1, s2 = s1 + offset, s2 + offset
    try:
        tr_covmean = trace_sqrt_product(s1, s2)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"matrix square root did not converge: {exc}") from exc
    d2 = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2 * tr_covmean)
    return max(d2, 0.0)


def compute_fid(real_images: torch.Tensor, gen_images: torch.Tensor, extractor=None) -> float:
    extractor = extractor if extractor is not None else RandomConvExtractor()
    real = gaussian_stats(extract_features(extractor, real_images))
    gen = gaussian_stats(extract_features(extractor, gen_images))
    return frechet_distance(real, gen)
