"""Dataset ingestion for CelebAMask-HQ style face data.

Layout on disk (all names configurable)::

    <root>/images/<id>.jpg
    <root>/masks/<id>_<part>.png
    <root>/attributes.txt

The attribute file uses the CelebA annotation format: the first line holds the
number of rows, the second the 40 attribute names, and every following line an
image file name followed by 40 values in {-1, +1}.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

N_ATTRIBUTES = 40
PART_NAMES = (
    "skin",
    "hair",
    "l_eye",
    "r_eye",
    "l_brow",
    "r_brow",
    "nose",
    "mouth",
    "eyeglass",
    "hat",
)

# Modes with an unambiguous conversion to RGB.
_RGB_CONVERTIBLE = {"RGB", "RGBA", "L", "LA", "P", "1"}
_MASK_MODES = {"1", "L", "LA", "P", "RGB", "RGBA", "I", "I;16"}


class DataFormatError(ValueError):
    pass


class RangeMode(str, enum.Enum):
    ZERO_ONE = "zero_one"
    MINUS_ONE_ONE = "minus_one_one"


@dataclass
class AttributeTable:
    names: list[str]
    rows: dict[str, np.ndarray]

    def __post_init__(self):
        if len(self.names) != N_ATTRIBUTES:
            raise DataFormatError(f"expected {N_ATTRIBUTES} attribute names, got {len(self.names)}")
        for key, bits in self.rows.items():
            if bits.shape != (N_ATTRIBUTES,) or not np.isin(bits, (0, 1)).all():
                raise DataFormatError(f"row {key!r} is not a {N_ATTRIBUTES}-bit vector")

    def __len__(self):
        return len(self.rows)

    def vector(self, image_id: str) -> np.ndarray:
        return self.rows[image_id]

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class Split:
    train_ids: list[str]
    test_ids: list[str]
    seed: int


def _sign_to_bit(token: str) -> int:
    if token in ("1", "+1"):
        return 1
    if token in ("-1", "−1"):
        return 0
    raise DataFormatError(f"unknown attribute value token {token!r}")


def load_attribute_table(path) -> AttributeTable:
    """Parse a CelebA-format attribute file.

    Rows are keyed by the file-name stem (``"00012.jpg"`` -> ``"00012"``) so
    keys line up with the ``images/<id>.jpg`` layout.
    """
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(lines) < 2:
        raise DataFormatError("attribute file needs a count line and a header line")
    try:
        declared = int(lines[0].strip())
    except ValueError as exc:
        raise DataFormatError(f"malformed count line {lines[0]!r}") from exc
    names = lines[1].split()
    if len(names) != N_ATTRIBUTES:
        raise DataFormatError(f"header has {len(names)} names, expected {N_ATTRIBUTES}")

    rows: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[2:], start=3):
        tokens = line.split()
        if len(tokens) != N_ATTRIBUTES + 1:
            raise DataFormatError(
                f"line {lineno}: expected {N_ATTRIBUTES} values, got {len(tokens) - 1}"
            )
        bits = np.array([_sign_to_bit(t) for t in tokens[1:]], dtype=np.uint8)
        rows[Path(tokens[0]).stem] = bits
    if len(rows) != declared:
        raise DataFormatError(f"declared {declared} rows, found {len(rows)}")
    return AttributeTable(names=names, rows=rows)


def bits_to_signs(bits: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(bits) > 0, 1, -1).astype(np.int8)


def signs_to_bits(signs: np.ndarray) -> np.ndarray:
    return (np.asarray(signs) > 0).astype(np.uint8)


def _as_hw(target_size) -> tuple[int, int]:
    if isinstance(target_size, int):
        return target_size, target_size
    h, w = target_size
    return int(h), int(w)


def load_image(path, target_size, range_mode: RangeMode | str = RangeMode.MINUS_ONE_ONE) -> np.ndarray:
    """Load an RGB image as an ``H x W x 3`` float32 array.

    Bilinear resize; ``ZERO_ONE`` keeps pixel values in [0, 1] while
    ``MINUS_ONE_ONE`` maps them through ``x * 2 - 1``.
    """
    range_mode = RangeMode(range_mode)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"cannot read image {path}: {exc}") from exc
    if img.mode not in _RGB_CONVERTIBLE:
        raise DataFormatError(f"{path}: no RGB conversion rule for mode {img.mode!r}")
    img = img.convert("RGB")
    h, w = _as_hw(target_size)
    if img.size != (w, h):
        img = img.resize((w, h), Image.Resampling.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if range_mode is RangeMode.MINUS_ONE_ONE:
        arr = arr * 2.0 - 1.0
    return arr


def _load_mask(path: Path, size: tuple[int, int], threshold: float) -> np.ndarray:
    img = Image.open(path)
    img.load()
    if img.mode not in _MASK_MODES:
        raise DataFormatError(f"{path}: unsupported mask mode {img.mode!r}")
    h, w = size
    if img.mode in ("I", "I;16"):
        raw = np.asarray(img, dtype=np.int64)
        if raw.min() < 0 or raw.max() > 255:
            raise DataFormatError(f"{path}: mask values outside [0, 255]")
        img = Image.fromarray(raw.astype(np.uint8), mode="L")
    else:
        img = img.convert("L")
    if img.size != (w, h):
        img = img.resize((w, h), Image.Resampling.NEAREST)
    scaled = np.asarray(img, dtype=np.float32) / 255.0
    return (scaled >= threshold).astype(np.float32)


def load_mask_stack(
    directory,
    image_id: str,
    target_size,
    part_names: Sequence[str] = PART_NAMES,
    threshold: float = 0.5,
) -> np.ndarray:
    """Stack per-part binary masks into a ``10 x H x W`` float32 array.

    A part without a file becomes an all-zero channel; CelebAMask-HQ omits
    masks for parts that are absent from a face.
    """
    if len(part_names) != len(PART_NAMES):
        raise DataFormatError(f"expected {len(PART_NAMES)} part names, got {len(part_names)}")
    size = _as_hw(target_size)
    directory = Path(directory)
    stack = np.zeros((len(part_names), *size), dtype=np.float32)
    for c, part in enumerate(part_names):
        path = directory / f"{image_id}_{part}.png"
        if path.exists():
            stack[c] = _load_mask(path, size, threshold)
    return stack


def make_split(ids: Sequence[str], n_train: int, n_test: int, seed: int) -> Split:
    ids = sorted(ids)
    if n_train < 0 or n_test < 0 or n_train + n_test > len(ids):
        raise ValueError(f"cannot split {len(ids)} ids into {n_train} train + {n_test} test")
    order = np.random.default_rng(seed).permutation(len(ids))
    picked = [ids[i] for i in order[: n_train + n_test]]
    return Split(train_ids=picked[:n_train], test_ids=picked[n_train:], seed=seed)


def parse_attribute_bits(text: str) -> np.ndarray:
    """Parse a 40-character '0'/'1' bitstring."""
    text = text.strip()
    if len(text) != N_ATTRIBUTES or set(text) - {"0", "1"}:
        raise ValueError(f"attribute bitstring must be {N_ATTRIBUTES} characters of 0/1")
    return np.array([int(c) for c in text], dtype=np.uint8)


def format_attribute_bits(bits) -> str:
    return "".join("1" if b else "0" for b in np.asarray(bits).reshape(-1))


class FaceDataset(torch.utils.data.Dataset):
    """Lazily loaded image/attribute/mask triples for a list of image ids."""

    def __init__(
        self,
        root,
        ids: Sequence[str],
        image_size: int,
        range_mode: RangeMode | str = RangeMode.MINUS_ONE_ONE,
        attributes: AttributeTable | None = None,
        with_masks: bool = False,
        images_dir: str = "images",
        masks_dir: str = "masks",
        image_ext: str = ".jpg",
        mask_threshold: float = 0.5,
    ):
        self.root = Path(root)
        self.ids = list(ids)
        self.image_size = image_size
        self.range_mode = RangeMode(range_mode)
        self.attributes = attributes
        self.with_masks = with_masks
        self.images_dir = self.root / images_dir
        self.masks_dir = self.root / masks_dir
        self.image_ext = image_ext
        self.mask_threshold = mask_threshold

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, idx):
        image_id = self.ids[idx]
        img = load_image(self.images_dir / f"{image_id}{self.image_ext}", self.image_size, self.range_mode)
        item = {"image": torch.from_numpy(img).permute(2, 0, 1).contiguous()}
        if self.attributes is not None:
            item["attrs"] = torch.from_numpy(self.attributes.vector(image_id).astype(np.float32))
        if self.with_masks:
            masks = load_mask_stack(self.masks_dir, image_id, self.image_size, threshold=self.mask_threshold)
            item["masks"] = torch.from_numpy(masks)
        return item


@dataclass
class TensorFaceDataset(torch.utils.data.Dataset):
    """In-memory dataset; ``images`` is N x 3 x H x W."""

    images: torch.Tensor
    attrs: torch.Tensor | None = None
    masks: torch.Tensor | None = None
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.images)
        for name in ("attrs", "masks"):
            value = getattr(self, name)
            if value is not None and len(value) != n:
                raise ValueError(f"{name} has {len(value)} rows, images has {n}")
        if not self.ids:
            self.ids = [str(i) for i in range(n)]

    def __len__(self):
        return len(self.images)

    def __getitem__(self, idx):
        item = {"image": self.images[idx]}
        if self.attrs is not None:
            item["attrs"] = self.attrs[idx]
        if self.masks is not None:
            item["masks"] = self.masks[idx]
        return item


def collate(items: list[dict]) -> dict:
    return {key: torch.stack([it[key] for it in items]) for key in items[0]}


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Sample order for one epoch; a function of (seed, epoch) only."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return max(1, n // batch_size)


def iterate_batches(dataset, batch_size: int, seed: int, start: int = 0) -> Iterator[dict]:
    """Endless stream of batches with deterministic order.

    Each epoch is a fresh permutation; the trailing partial batch is dropped
    unless the dataset is smaller than one batch. ``start`` is a global batch
    index, so a resumed run continues the exact same sequence.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    per_epoch = batches_per_epoch(n, batch_size)
    epoch, offset = divmod(start, per_epoch)
    while True:
        order = epoch_order(n, seed, epoch)
        for b in range(offset, per_epoch):
            idx = order[b * batch_size : (b + 1) * batch_size]
            yield collate([dataset[int(i)] for i in idx])
        epoch += 1
        offset = 0
