"""``facediff`` command line: train, sample, fid, inspect, schema, presets."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pydantic
import torch
from PIL import Image

from .adapters import lora_layers
from .backbones import count_parameters
from .config import PipelineKind, RunConfig, experiment_presets, json_schema
from .dataio import (
    PART_NAMES,
    DataFormatError,
    FaceDataset,
    load_attribute_table,
    load_mask_stack,
    make_split,
    parse_attribute_bits,
)
from .metrics import compute_fid, get_extractor, load_image_dir
from .training import CheckpointError, fit, load_checkpoint, read_checkpoint_meta

log = logging.getLogger("facediff")

USER_ERRORS = (pydantic.ValidationError, FileNotFoundError, ValueError, KeyError, CheckpointError, DataFormatError)


def _load_config(path) -> RunConfig:
    if str(path) in experiment_presets() and not Path(path).exists():
        path = experiment_presets()[str(path)]
    return RunConfig.load(path)


def build_dataset(config: RunConfig):
    """Training split of the dataset described by ``config.data``."""
    config.validate_paths()
    data = config.data
    paths = data.paths
    ids = sorted(p.stem for p in paths["images"].glob(f"*{data.image_ext}"))
    table = None
    if config.pipeline.conditional:
        table = load_attribute_table(paths["attributes"])
        ids = [i for i in ids if i in table.rows]
    if not ids:
        raise FileNotFoundError(f"no usable *{data.image_ext} images under {paths['images']}")
    split = make_split(ids, min(data.n_train, len(ids)), min(data.n_test, max(0, len(ids) - data.n_train)),
                       data.split_seed)
    dataset = FaceDataset(
        data.root,
        split.train_ids,
        config.image_size,
        data.range_mode,
        attributes=table,
        with_masks=config.pipeline is PipelineKind.COND_ATTR_SEG,
        images_dir=data.images_dir,
        masks_dir=data.masks_dir,
        image_ext=data.image_ext,
        mask_threshold=data.mask_threshold,
    )
    return dataset, split


def cmd_train(args) -> int:
    config = _load_config(args.config)
    dataset, split = build_dataset(config)
    out = Path(args.out) if args.out else Path(config.output_dir) / config.name
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.yaml")
    (out / "split.json").write_text(json.dumps({"seed": split.seed, "train": split.train_ids, "test": split.test_ids}))
    state = fit(config, dataset, out_dir=out, resume=args.resume)
    last = state.history[-1] if state.history else {}
    print(json.dumps({"out": str(out), "step": state.step, "final_loss": last.get("total_loss")}))
    return 0


def _read_attrs(spec: str, n: int) -> np.ndarray:
    path = Path(spec)
    if path.is_file():
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    else:
        lines = [spec]
    bits = np.stack([parse_attribute_bits(ln) for ln in lines]).astype(np.float32)
    if len(bits) not in (1, n):
        raise ValueError(f"attribute file has {len(bits)} rows; expected 1 or {n}")
    return np.broadcast_to(bits, (n, bits.shape[1])).copy()


def _read_masks(directory, n: int, size: int, threshold: float) -> torch.Tensor:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"masks directory {directory} does not exist")
    ids = set()
    for p in directory.glob("*.png"):
        for part in PART_NAMES:
            if p.stem.endswith("_" + part):
                ids.add(p.stem[: -len(part) - 1])
    ids = sorted(ids)
    if not ids:
        raise FileNotFoundError(f"no <id>_<part>.png masks in {directory}")
    stacks = [load_mask_stack(directory, ids[i % len(ids)], size, threshold=threshold) for i in range(n)]
    return torch.from_numpy(np.stack(stacks))


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """N x 3 x H x W in [0, 1] -> N x H x W x 3 uint8."""
    return (images.clamp(0, 1) * 255).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()


def contact_sheet(pixels: np.ndarray, cols: int | None = None) -> np.ndarray:
    n, h, w, c = pixels.shape
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    sheet = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    for i, px in enumerate(pixels):
        r, col = divmod(i, cols)
        sheet[r * h : (r + 1) * h, col * w : (col + 1) * w] = px
    return sheet


def cmd_sample(args) -> int:
    state = load_checkpoint(args.checkpoint)
    pipe = state.pipeline
    config = state.config
    attrs = masks = None
    if args.attrs is not None:
        if not config.pipeline.conditional:
            raise ValueError(f"checkpoint is {config.pipeline.value}; --attrs is only valid for conditional pipelines")
        attrs = torch.from_numpy(_read_attrs(args.attrs, args.n))
    elif config.pipeline.conditional:
        raise ValueError(f"{config.pipeline.value} checkpoints need --attrs (bitstring or file)")
    if args.masks_dir is not None:
        if config.pipeline is not PipelineKind.COND_ATTR_SEG:
            raise ValueError("--masks-dir is only valid for cond_attr_seg checkpoints")
        threshold = config.data.mask_threshold if config.data is not None else 0.5
        masks = _read_masks(args.masks_dir, args.n, pipe.image_size, threshold)

    images = state.sample(args.n, seed=args.seed, attrs=attrs, masks=masks, use_ema=not args.no_ema)
    pixels = to_uint8(pipe.to_unit_range(images))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, px in enumerate(pixels):
        Image.fromarray(px).save(out / f"sample_{i:04d}.png")
    # The contact sheet lives in a subfolder so ``out`` can be passed straight to ``fid``.
    (out / "grid").mkdir(exist_ok=True)
    Image.fromarray(contact_sheet(pixels)).save(out / "grid" / "grid.png")
    print(json.dumps({"out": str(out), "n": args.n, "seed": args.seed}))
    return 0


def cmd_fid(args) -> int:
    extractor = get_extractor(args.extractor)
    real = load_image_dir(args.real_dir, args.size)
    gen = load_image_dir(args.gen_dir, args.size)
    value = compute_fid(real, gen, extractor)
    print(json.dumps({"fid": value, "n_real": len(real), "n_gen": len(gen), "extractor_id": extractor.extractor_id}))
    return 0


def cmd_inspect(args) -> int:
    meta = read_checkpoint_meta(args.checkpoint)
    state = load_checkpoint(args.checkpoint)
    record = {
        "step": state.step,
        "format_version": meta["format_version"],
        "pipeline": state.config.pipeline.value,
        "parameters": count_parameters(state.pipeline),
        "denoiser_parameters": count_parameters(state.pipeline.denoiser),
        "trainable_parameters": count_parameters(state.pipeline, trainable_only=True),
        "ema": state.ema is not None,
        "ema_decay": state.ema.decay if state.ema is not None else None,
        "lora_layers": len(lora_layers(state.pipeline)),
        "config": state.config.to_dict(),
    }
    print(json.dumps(record, indent=2))
    return 0


def cmd_validate(args) -> int:
    config = _load_config(args.config)
    if config.data is not None and args.check_paths:
        config.validate_paths()
    print(json.dumps({"ok": True, "pipeline": config.pipeline.value, "denoiser": type(config.denoiser_config()).__name__}))
    return 0


def cmd_schema(args) -> int:
    print(json.dumps(json_schema(), indent=2))
    return 0


def cmd_presets(args) -> int:
    for name, path in experiment_presets().items():
        print(f"{name}\t{path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facediff", description="Diffusion models for face generation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a pipeline from a YAML config")
    p.add_argument("--config", required=True, help="config file or shipped preset name")
    p.add_argument("--out", help="output directory (default: <output_dir>/<name>)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--attrs", help="40-character 0/1 bitstring, or a file with one bitstring per line")
    p.add_argument("--masks-dir", help="directory of <id>_<part>.png masks (cond_attr_seg only)")
    p.add_argument("--out", required=True)
    p.add_argument("--no-ema", action="store_true", help="sample with raw instead of EMA weights")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("fid", help="Frechet distance between two image directories")
    p.add_argument("real_dir")
    p.add_argument("gen_dir")
    p.add_argument("--extractor", default="random_conv", choices=["random_conv", "pixel", "inception"])
    p.add_argument("--size", type=int, help="resize images to this square size before extraction")
    p.set_defaults(func=cmd_fid)

    p = sub.add_parser("inspect", help="print checkpoint summary")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("validate", help="validate a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--check-paths", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("schema", help="print the config JSON schema")
    p.set_defaults(func=cmd_schema)

    p = sub.add_parser("presets", help="list shipped experiment configs")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "sample" and args.n < 1:
        print("error: --n must be positive", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
