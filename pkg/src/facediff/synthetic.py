"""Small synthetic datasets for smoke tests, demos and the CLI walkthrough."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .dataio import N_ATTRIBUTES, PART_NAMES, format_attribute_bits


def face_blobs(n: int = 8, size: int = 32, seed: int = 0) -> torch.Tensor:
    """Smooth 'faces': an ellipse with two eye dots on a vertical gradient, in [-1, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    out = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        top, bottom = rng.uniform(-0.8, 0.8, 3), rng.uniform(-0.8, 0.8, 3)
        img = top[:, None, None] * (1 - yy) + bottom[:, None, None] * yy
        cx, cy = rng.uniform(0.4, 0.6, 2)
        rx, ry = rng.uniform(0.2, 0.3), rng.uniform(0.25, 0.35)
        face = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 < 1
        img[:, face] = rng.uniform(0.2, 0.9, 3)[:, None]
        for ex in (cx - rx / 2.5, cx + rx / 2.5):
            eye = ((xx - ex) ** 2 + (yy - (cy - ry / 3)) ** 2) < (size * 0.002)
            img[:, eye] = -0.9
        out[i] = img
    return torch.from_numpy(out)


def two_class_fixture(n: int = 32, size: int = 16, seed: int = 0, noise: float = 0.05):
    """Left-bright vs right-bright images with one-hot attributes.

    Class 0 sets attribute bit 0 and brightens the left half; class 1 sets
    bit 1 and brightens the right half. Returns (images, attrs, labels).
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = np.full((n, 3, size, size), -0.8, dtype=np.float32)
    half = size // 2
    for i, c in enumerate(labels):
        cols = slice(0, half) if c == 0 else slice(half, size)
        images[i, :, :, cols] = 0.8
    images += rng.normal(0, noise, images.shape).astype(np.float32)
    attrs = np.zeros((n, N_ATTRIBUTES), dtype=np.float32)
    attrs[np.arange(n), labels] = 1.0
    return torch.from_numpy(images.clip(-1, 1)), torch.from_numpy(attrs), torch.from_numpy(labels)


def class_statistic(images: torch.Tensor) -> torch.Tensor:
    """Predicted class per image: 0 if the left half is brighter, else 1."""
    half = images.shape[-1] // 2
    left = images[..., :half].mean(dim=(1, 2, 3))
    right = images[..., half:].mean(dim=(1, 2, 3))
    return (right > left).long()


def write_dataset_dir(root, images: torch.Tensor, attrs: torch.Tensor | None = None,
                      masks: torch.Tensor | None = None, attr_names=None) -> list[str]:
    """Write an images/masks/attributes.txt tree readable by :class:`FaceDataset`.

    ``images`` are N x 3 x H x W in [-1, 1]; ``masks`` are N x 10 x H x W binary.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    ids = [f"{i:05d}" for i in range(len(images))]
    pixels = ((images.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
    for image_id, px in zip(ids, pixels):
        Image.fromarray(px).save(root / "images" / f"{image_id}.png")
    if attrs is not None:
        names = attr_names or [f"attr_{k:02d}" for k in range(N_ATTRIBUTES)]
        lines = [str(len(ids)), " ".join(names)]
        for image_id, bits in zip(ids, attrs):
            signs = " ".join("1" if b > 0 else "-1" for b in bits.tolist())
            lines.append(f"{image_id}.png {signs}")
        (root / "attributes.txt").write_text("\n".join(lines) + "\n")
    if masks is not None:
        (root / "masks").mkdir(exist_ok=True)
        for image_id, stack in zip(ids, masks):
            for part, channel in zip(PART_NAMES, stack):
                if channel.any():
                    arr = (channel.numpy() > 0).astype(np.uint8) * 255
                    Image.fromarray(arr, mode="L").save(root / "masks" / f"{image_id}_{part}.png")
    return ids


def random_attribute_bits(n: int, seed: int = 0, p: float = 0.25) -> list[str]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        bits = rng.random(N_ATTRIBUTES) < p
        if not bits.any():
            bits[rng.integers(N_ATTRIBUTES)] = True
        out.append(format_attribute_bits(bits))
    return out
