"""Run configuration: YAML files validated against pydantic models.

Unknown keys are rejected at every nesting level. ``facediff schema`` prints
the JSON schema for the top-level :class:`RunConfig`.
"""

from __future__ import annotations

import enum
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveInt, model_validator

from .backbones.configs import DiTConfig, UNetConfig, resolve_arch
from .conditioning import ConditioningConfig
from .dataio import RangeMode
from .latentcodec import CodecSpec


class PipelineKind(str, enum.Enum):
    UNCOND_PIXEL = "uncond_pixel"
    UNCOND_LATENT = "uncond_latent"
    COND_ATTR = "cond_attr"
    COND_ATTR_SEG = "cond_attr_seg"

    @property
    def conditional(self) -> bool:
        return self in (PipelineKind.COND_ATTR, PipelineKind.COND_ATTR_SEG)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ScheduleConfig(_Strict):
    T: PositiveInt = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: Literal["linear"] = "linear"


class TrainConfig(_Strict):
    base_lr: float = Field(2e-4, gt=1e-6, lt=1e-2)
    warmup_steps: NonNegativeInt = 500
    total_steps: PositiveInt = 10_000
    batch_size: PositiveInt = 16
    lambda_attr: float = Field(1.0, ge=0)
    ema_enabled: bool = True
    ema_decay: float = Field(0.999, ge=0, le=1)
    timestep_strategy: Literal["uniform", "phase_weighted"] = "uniform"
    focus_mass: float = Field(0.6, ge=0, le=1)
    lr_schedule: Literal["constant", "cosine"] = "constant"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    checkpoint_every: NonNegativeInt = 0
    log_every: PositiveInt = 1

    @model_validator(mode="after")
    def _check(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        return self


class DataConfig(_Strict):
    root: str
    images_dir: str = "images"
    masks_dir: str = "masks"
    attributes_file: str = "attributes.txt"
    image_ext: str = ".jpg"
    image_size: PositiveInt = 128
    range_mode: RangeMode = RangeMode.MINUS_ONE_ONE
    n_train: PositiveInt = 2700
    n_test: NonNegativeInt = 300
    split_seed: int = 0
    mask_threshold: float = Field(0.5, gt=0, le=1)

    @property
    def paths(self) -> dict[str, Path]:
        root = Path(self.root)
        return {
            "root": root,
            "images": root / self.images_dir,
            "masks": root / self.masks_dir,
            "attributes": root / self.attributes_file,
        }


class RunConfig(_Strict):
    name: str = "run"
    pipeline: PipelineKind
    arch: Union[str, dict[str, Any]]
    train: TrainConfig = TrainConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    codec: Optional[CodecSpec] = None
    conditioning: ConditioningConfig = ConditioningConfig()
    data: Optional[DataConfig] = None
    output_dir: str = "runs"

    @model_validator(mode="after")
    def _check(self):
        arch = self.denoiser_config()
        kind = self.pipeline
        if kind.conditional:
            if not isinstance(arch, UNetConfig) or not arch.has_cross_attention:
                raise ValueError(f"{kind.value} needs a UNet preset with cross-attention")
            want = self.conditioning.attr_dim if kind is PipelineKind.COND_ATTR else self.conditioning.context_dim
            if arch.context_dim != want:
                raise ValueError(f"denoiser context_dim {arch.context_dim} != conditioning width {want}")
        elif isinstance(arch, UNetConfig) and arch.has_cross_attention:
            raise ValueError(f"{kind.value} cannot use a cross-attention architecture")
        if kind is PipelineKind.UNCOND_LATENT and self.codec is None:
            raise ValueError("uncond_latent needs a codec")
        if kind is PipelineKind.UNCOND_PIXEL and self.codec is not None:
            raise ValueError("uncond_pixel must not declare a codec")
        if self.codec is not None:
            if arch.in_channels != self.codec.latent_channels or arch.input_size != self.codec.latent_size:
                raise ValueError(
                    f"denoiser expects {arch.in_channels}x{arch.input_size}^2 but codec yields "
                    f"{self.codec.latent_channels}x{self.codec.latent_size}^2"
                )
            if self.data is not None and self.data.image_size != self.codec.image_size:
                raise ValueError("data.image_size must equal codec.image_size")
            if self.data is not None and self.data.range_mode is not RangeMode.MINUS_ONE_ONE:
                raise ValueError("codecs expect minus_one_one images")
        else:
            if arch.in_channels != 3:
                raise ValueError("pixel-space denoisers need 3 input channels")
            if self.data is not None and self.data.image_size != arch.input_size:
                raise ValueError("data.image_size must equal the denoiser input_size")
        return self

    def denoiser_config(self) -> UNetConfig | DiTConfig:
        return resolve_arch(self.arch)

    @property
    def image_size(self) -> int:
        if self.codec is not None:
            return self.codec.image_size
        return self.denoiser_config().input_size

    @property
    def range_mode(self) -> RangeMode:
        return self.data.range_mode if self.data is not None else RangeMode.MINUS_ONE_ONE

    def validate_paths(self) -> None:
        if self.data is None:
            raise ValueError("config has no data section")
        paths = self.data.paths
        required = ["root", "images"]
        if self.pipeline.conditional:
            required.append("attributes")
        if self.pipeline is PipelineKind.COND_ATTR_SEG:
            required.append("masks")
        missing = [f"{k}: {paths[k]}" for k in required if not paths[k].exists()]
        if missing:
            raise FileNotFoundError("missing paths: " + ", ".join(missing))

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        return cls.model_validate(yaml.safe_load(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_yaml(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())


def json_schema() -> dict:
    return RunConfig.model_json_schema()


PRESET_DIR = Path(__file__).parent / "presets"


def experiment_presets() -> dict[str, Path]:
    return {p.stem: p for p in sorted(PRESET_DIR.glob("*.yaml"))}
