"""Training loop, EMA, warmup schedule and checkpoint container.

A checkpoint is a single ``.npz`` file: one array per named tensor plus a
``__meta__`` entry holding UTF-8 JSON (format version, config snapshot, step,
schedule parameters, optimizer hyper-parameters).
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import build_denoiser
from .conditioning import Conditioner, ConditioningMode, attribute_similarity_mask, info_nce_loss, skipped_rows
from .config import PipelineKind, RunConfig, TrainConfig
from .dataio import RangeMode, iterate_batches
from .ddpm import (
    NoiseSchedule,
    build_schedule,
    forward_noise,
    generate,
    phase_weighted_sampler,
    sample_timesteps,
    uniform_sampler,
)
from .latentcodec import ConvAutoencoder, make_codec, train_codec

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

__all__ = [
    "FORMAT_VERSION",
    "CheckpointError",
    "DiffusionPipeline",
    "EMAState",
    "TrainConfig",
    "TrainState",
    "ema_update",
    "fit",
    "load_checkpoint",
    "lr_at_step",
    "make_state",
    "save_checkpoint",
    "training_step",
]


class CheckpointError(RuntimeError):
    pass


def lr_at_step(step: int, base_lr: float, warmup_steps: int, total_steps: int | None = None,
               schedule: str = "constant") -> float:
    """Linear ramp from 0 to ``base_lr`` over ``warmup_steps``, then constant (or cosine decay)."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if schedule == "cosine" and total_steps:
        span = max(1, total_steps - warmup_steps)
        progress = min(1.0, (step - warmup_steps) / span)
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    return base_lr


@dataclass
class EMAState:
    shadow: dict[str, torch.Tensor]
    decay: float

    @classmethod
    def from_params(cls, params: Mapping[str, torch.Tensor], decay: float) -> "EMAState":
        return cls({n: p.detach().clone() for n, p in params.items()}, decay)

    @classmethod
    def from_module(cls, module: nn.Module, decay: float) -> "EMAState":
        return cls.from_params({n: p for n, p in module.named_parameters() if p.requires_grad}, decay)


def ema_update(ema: EMAState, params: Mapping[str, torch.Tensor], d: float | None = None) -> EMAState:
    """shadow <- d * shadow + (1 - d) * param, in place."""
    d = ema.decay if d is None else d
    if set(params) != set(ema.shadow):
        raise KeyError("parameter names do not match the EMA shadow")
    with torch.no_grad():
        for name, s in ema.shadow.items():
            p = params[name]
            if p.shape != s.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(s.shape)}")
            s.copy_(d * s + (1.0 - d) * p.detach())
    return ema


class DiffusionPipeline(nn.Module):
    """Denoiser plus optional frozen codec and conditioning branches."""

    def __init__(self, config: RunConfig):
        super().__init__()
        self.run_config = config
        self.kind = config.pipeline
        self.denoiser = build_denoiser(config.denoiser_config())
        self.codec = make_codec(config.codec) if config.codec is not None else None
        if self.kind.conditional:
            mode = ConditioningMode.ATTR_ONLY if self.kind is PipelineKind.COND_ATTR else ConditioningMode.ATTR_PLUS_SEG
            self.conditioner = Conditioner(config.conditioning, mode)
        else:
            self.conditioner = None
        self.range_mode = config.range_mode

    @property
    def model_shape(self) -> tuple[int, int, int]:
        if self.codec is not None:
            return self.codec.latent_shape
        cfg = self.denoiser.config
        return (cfg.in_channels, cfg.input_size, cfg.input_size)

    @property
    def image_size(self) -> int:
        return self.run_config.image_size

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def to_model_space(self, images: torch.Tensor) -> torch.Tensor:
        if self.codec is None:
            return images
        with torch.no_grad():
            return self.codec.encode(images)

    @property
    def pixel_bounds(self) -> tuple[float, float]:
        return (0.0, 1.0) if self.range_mode is RangeMode.ZERO_ONE else (-1.0, 1.0)

    def from_model_space(self, x: torch.Tensor) -> torch.Tensor:
        if self.codec is not None:
            return self.codec.decode(x)
        return x.clamp(*self.pixel_bounds)

    def to_unit_range(self, images: torch.Tensor) -> torch.Tensor:
        """Map images from the pipeline's pixel range to [0, 1]."""
        if self.range_mode is RangeMode.ZERO_ONE:
            return images.clamp(0, 1)
        return ((images + 1) / 2).clamp(0, 1)

    def context(self, attrs, masks=None):
        if self.conditioner is None:
            if attrs is not None:
                raise ValueError("unconditional pipeline does not accept attributes")
            return None, None
        if attrs is None:
            raise ValueError("conditional pipeline needs attribute vectors")
        context, z = self.conditioner(attrs, masks)
        return context[:, None, :], z

    @torch.no_grad()
    def sample(self, schedule: NoiseSchedule, n: int, seed: int = 0, attrs=None, masks=None) -> torch.Tensor:
        """Generate ``n`` images (N x 3 x H x W) in the pipeline's pixel range."""
        if attrs is not None:
            attrs = torch.as_tensor(attrs, dtype=torch.float32)
            if attrs.ndim == 1:
                attrs = attrs.expand(n, -1)
        if self.kind is PipelineKind.COND_ATTR_SEG and attrs is not None and masks is None:
            masks = torch.zeros(n, 10, self.image_size, self.image_size)
        was_training = self.training
        self.eval()
        try:
            context, _ = self.context(attrs, masks)
            x = generate(self.denoiser, schedule, n, self.model_shape, context=context, seed=seed,
                         clip_x0=self.pixel_bounds if self.codec is None else None)
        finally:
            self.train(was_training)
        return self.from_model_space(x)


def _schedule_from(config: RunConfig) -> NoiseSchedule:
    s = config.schedule
    return build_schedule(s.T, s.beta_start, s.beta_end, s.kind)


@dataclass
class TrainState:
    config: RunConfig
    pipeline: DiffusionPipeline
    optimizer: torch.optim.Optimizer
    schedule: NoiseSchedule
    ema: EMAState | None
    noise_gen: torch.Generator
    step: int = 0
    history: list[dict] = field(default_factory=list)

    def ema_pipeline(self) -> DiffusionPipeline:
        """Copy of the pipeline with EMA weights swapped in (raw weights if EMA is off)."""
        twin = copy.deepcopy(self.pipeline)
        if self.ema is not None:
            params = dict(twin.named_parameters())
            with torch.no_grad():
                for name, value in self.ema.shadow.items():
                    params[name].copy_(value)
        return twin

    def sample(self, n: int, seed: int = 0, attrs=None, masks=None, use_ema: bool = True) -> torch.Tensor:
        pipe = self.ema_pipeline() if use_ema and self.ema is not None else self.pipeline
        return pipe.sample(self.schedule, n, seed, attrs, masks)


def _diffusion_params(pipeline: DiffusionPipeline) -> dict[str, torch.Tensor]:
    """Trainable parameters outside the (frozen or separately trained) codec."""
    return {n: p for n, p in pipeline.named_parameters() if p.requires_grad and not n.startswith("codec.")}


def make_state(config: RunConfig) -> TrainState:
    torch.manual_seed(config.train.seed)
    pipeline = DiffusionPipeline(config)
    params = _diffusion_params(pipeline)
    optimizer = torch.optim.Adam(list(params.values()), lr=0.0, betas=tuple(config.train.adam_betas), weight_decay=0.0)
    ema = EMAState.from_params(params, config.train.ema_decay) if config.train.ema_enabled else None
    gen = torch.Generator().manual_seed(config.train.seed)
    return TrainState(config, pipeline, optimizer, _schedule_from(config), ema, gen)


def _sampler(state: TrainState):
    cfg = state.config.train
    T = state.schedule.T
    if cfg.timestep_strategy == "uniform":
        return uniform_sampler(T)
    return phase_weighted_sampler(T, min(1.0, state.step / cfg.total_steps), cfg.focus_mass)


def training_step(batch: dict, state: TrainState) -> dict:
    """One optimizer step on ``batch``; returns the loss components and learning rate."""
    cfg = state.config.train
    pipe = state.pipeline
    pipe.train()
    if pipe.codec is not None:
        pipe.codec.eval()

    lr = lr_at_step(state.step + 1, cfg.base_lr, cfg.warmup_steps, cfg.total_steps, cfg.lr_schedule)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    x0 = pipe.to_model_space(batch["image"])
    t = sample_timesteps(x0.shape[0], _sampler(state), state.noise_gen)
    eps = torch.randn(x0.shape, generator=state.noise_gen)
    xt = forward_noise(x0, t, eps, state.schedule)

    stats: dict = {"step": state.step + 1, "lr": lr}
    attr_loss = None
    if pipe.kind.conditional:
        attrs = batch["attrs"]
        context, z = pipe.context(attrs, batch.get("masks"))
        nce = state.config.conditioning.infonce
        mask = attribute_similarity_mask(attrs, nce.threshold, nce.zero_vector_mode)
        attr_loss = info_nce_loss(z, mask, nce.tau)
        stats["skipped_rows"] = skipped_rows(mask)
    else:
        context = None

    eps_hat = pipe.denoiser(xt, t, context)
    diffusion_loss = F.mse_loss(eps_hat, eps)
    total = diffusion_loss.double()
    if attr_loss is not None and cfg.lambda_attr > 0:
        total = total + cfg.lambda_attr * attr_loss.double()

    if not torch.isfinite(total):
        raise FloatingPointError(
            f"non-finite loss at step {state.step + 1}: diffusion={diffusion_loss.detach().item()}, "
            f"attr={None if attr_loss is None else attr_loss.detach().item()}, lr={lr}, t range=({int(t.min())}, {int(t.max())})"
        )

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    if state.ema is not None:
        ema_update(state.ema, _diffusion_params(state.pipeline))
    state.step += 1

    stats["diffusion_loss"] = diffusion_loss.detach().item()
    if attr_loss is not None:
        stats["attr_loss"] = attr_loss.detach().item()
        stats["lambda_attr"] = cfg.lambda_attr
    stats["total_loss"] = total.detach().item()
    return stats


def _dataset_images(dataset) -> torch.Tensor:
    if hasattr(dataset, "images"):
        return dataset.images
    return torch.stack([dataset[i]["image"] for i in range(len(dataset))])


def fit(
    config: RunConfig,
    dataset,
    arch=None,
    out_dir=None,
    resume=None,
    callback: Callable[[TrainState, dict], None] | None = None,
) -> TrainState:
    """Run ``config.train.total_steps`` steps (continuing from ``resume`` if given).

    Writes ``log.jsonl``, periodic ``ckpt_<step>.npz`` files and ``final.npz``
    into ``out_dir`` when it is set.
    """
    if arch is not None:
        config = RunConfig.model_validate({**config.to_dict(), "arch": arch})
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if resume is not None:
        state = load_checkpoint(resume)
        if _comparable(state.config) != _comparable(config):
            raise CheckpointError("checkpoint config does not match the requested run")
        state.config = config
    else:
        state = make_state(config)

    codec = state.pipeline.codec
    if isinstance(codec, ConvAutoencoder) and not codec.frozen:
        train_codec(codec, _dataset_images(dataset), config.codec.train_steps, seed=config.train.seed)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "log.jsonl", "a")
    cfg = config.train
    batches = iterate_batches(dataset, cfg.batch_size, cfg.seed, start=state.step)
    try:
        while state.step < cfg.total_steps:
            stats = training_step(next(batches), state)
            state.history.append(stats)
            if state.step % cfg.log_every == 0 or state.step == cfg.total_steps:
                log.info("step %d loss %.5f lr %.2e", state.step, stats["total_loss"], stats["lr"])
                if log_fh is not None:
                    log_fh.write(json.dumps(stats) + "\n")
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(state, out / f"ckpt_{state.step:07d}.npz")
            if callback is not None:
                callback(state, stats)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        save_checkpoint(state, out / "final.npz")
    return state


def _comparable(config: RunConfig) -> dict:
    d = config.to_dict()
    d["train"] = {k: v for k, v in d["train"].items() if k not in ("total_steps", "checkpoint_every", "log_every")}
    d.pop("output_dir", None)
    return d


def _meta_array(meta: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    opt_state = state.optimizer.state_dict()
    codec = state.pipeline.codec
    meta = {
        "format_version": FORMAT_VERSION,
        "config": state.config.to_dict(),
        "step": state.step,
        "schedule": state.schedule.to_dict(),
        "codec_frozen": bool(codec.frozen) if codec is not None else None,
        "ema": {"decay": state.ema.decay} if state.ema is not None else None,
        "optimizer": {
            "param_groups": opt_state["param_groups"],
            "state_keys": {str(k): sorted(v) for k, v in opt_state["state"].items()},
        },
    }
    arrays = {"__meta__": _meta_array(meta)}
    for name, t in state.pipeline.state_dict().items():
        arrays[f"model/{name}"] = t.detach().cpu().numpy()
    if state.ema is not None:
        for name, t in state.ema.shadow.items():
            arrays[f"ema/{name}"] = t.detach().cpu().numpy()
    for idx, entry in opt_state["state"].items():
        for key, value in entry.items():
            arrays[f"optim/{idx}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    arrays["schedule/betas"] = state.schedule.betas.numpy()
    arrays["schedule/alpha_bars"] = state.schedule.alpha_bars.numpy()
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    arrays["rng/noise"] = state.noise_gen.get_state().numpy()

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def read_checkpoint_meta(path) -> dict:
    try:
        with np.load(Path(path)) as data:
            return json.loads(data["__meta__"].tobytes().decode("utf-8"))
    except (zipfile.BadZipFile, KeyError, ValueError, OSError, EOFError) as exc:
        raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> TrainState:
    meta = read_checkpoint_meta(path)
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r} (expected {FORMAT_VERSION})")
    try:
        with np.load(Path(path)) as data:
            arrays = {k: data[k] for k in data.files if k != "__meta__"}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc

    config = RunConfig.model_validate(meta["config"])
    state = make_state(config)
    pipe = state.pipeline
    try:
        model_sd = {k[len("model/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model/")}
        pipe.load_state_dict(model_sd, strict=True)
        if meta.get("codec_frozen"):
            pipe.codec.freeze()

        opt_state = {"state": {}, "param_groups": meta["optimizer"]["param_groups"]}
        for idx, keys in meta["optimizer"]["state_keys"].items():
            opt_state["state"][int(idx)] = {k: torch.from_numpy(arrays[f"optim/{idx}/{k}"].copy()) for k in keys}
        state.optimizer.load_state_dict(opt_state)

        if state.ema is not None:
            for name in state.ema.shadow:
                state.ema.shadow[name] = torch.from_numpy(arrays[f"ema/{name}"].copy())

        betas = torch.from_numpy(arrays["schedule/betas"].copy())
        if not torch.equal(betas, state.schedule.betas):
            raise CheckpointError("stored schedule differs from the one implied by the config")
        torch.set_rng_state(torch.from_numpy(arrays["rng/torch"].copy()))
        state.noise_gen.set_state(torch.from_numpy(arrays["rng/noise"].copy()))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {path} is missing {exc}") from exc
    state.step = int(meta["step"])
    return state
