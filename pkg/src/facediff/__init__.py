"""Diffusion models for face generation with contrastive attribute embeddings."""

from .adapters import inject_lora, load_adapters, merge_lora, save_adapters
from .backbones import build_denoiser, preset
from .conditioning import Conditioner, attribute_similarity_mask, info_nce_loss
from .config import PipelineKind, RunConfig
from .ddpm import build_schedule, denoise_step, forward_noise, generate, phase_weighted_sampler
from .latentcodec import CodecSpec, make_codec
from .metrics import compute_fid, frechet_distance
from .training import DiffusionPipeline, ema_update, fit, load_checkpoint, lr_at_step, save_checkpoint, training_step

__version__ = "0.1.0"

__all__ = [
    "CodecSpec",
    "Conditioner",
    "DiffusionPipeline",
    "PipelineKind",
    "RunConfig",
    "attribute_similarity_mask",
    "build_denoiser",
    "build_schedule",
    "compute_fid",
    "denoise_step",
    "ema_update",
    "fit",
    "forward_noise",
    "frechet_distance",
    "generate",
    "info_nce_loss",
    "inject_lora",
    "load_adapters",
    "load_checkpoint",
    "lr_at_step",
    "make_codec",
    "merge_lora",
    "phase_weighted_sampler",
    "preset",
    "save_adapters",
    "save_checkpoint",
    "training_step",
]
