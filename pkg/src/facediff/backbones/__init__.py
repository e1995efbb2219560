from .configs import (
    PRESETS,
    REPORTED_PARAMS_M,
    BlockKind,
    BlockSpec,
    DiTConfig,
    UNetConfig,
    preset,
    resolve_arch,
)
from .dit import DiT, build_dit
from .layers import count_parameters
from .unet import UNet, build_unet


def build_denoiser(config):
    """Build a UNet or DiT from a config, preset name or mapping."""
    config = resolve_arch(config)
    if isinstance(config, DiTConfig):
        return build_dit(config)
    return build_unet(config)


def forward(denoiser, x, t, context=None):
    return denoiser(x, t, context)


__all__ = [
    "PRESETS",
    "REPORTED_PARAMS_M",
    "BlockKind",
    "BlockSpec",
    "DiT",
    "DiTConfig",
    "UNet",
    "UNetConfig",
    "build_denoiser",
    "build_dit",
    "build_unet",
    "count_parameters",
    "forward",
    "preset",
    "resolve_arch",
]
