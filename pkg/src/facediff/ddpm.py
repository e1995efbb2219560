"""DDPM noise schedules, forward noising, ancestral sampling and timestep samplers.

Timesteps are 1-indexed throughout the public API (``t`` in ``[1, T]``); the
stored tables are 0-indexed, so entry ``t - 1`` belongs to timestep ``t``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch


class ScheduleKind(str, enum.Enum):
    LINEAR = "linear"


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    beta_start: float
    beta_end: float
    kind: ScheduleKind = ScheduleKind.LINEAR

    def _index(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if t.numel() and (t.min() < 1 or t.max() > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]")
        return t - 1

    def alpha_bar(self, t) -> torch.Tensor:
        return self.alpha_bars[self._index(t)]

    def alpha(self, t) -> torch.Tensor:
        return self.alphas[self._index(t)]

    def beta(self, t) -> torch.Tensor:
        return self.betas[self._index(t)]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "kind": self.kind.value}


def build_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: ScheduleKind | str = ScheduleKind.LINEAR,
) -> NoiseSchedule:
    kind = ScheduleKind(kind)
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(T, betas, alphas, alpha_bars, float(beta_start), float(beta_end), kind)


def _per_sample(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-batch table lookup against ``like``."""
    values = values.to(dtype=like.dtype, device=like.device)
    if values.ndim == 0:
        return values
    return values.reshape(-1, *([1] * (like.ndim - 1)))


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    abar = _per_sample(schedule.alpha_bar(t), x0)
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps


def denoise_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t, schedule: NoiseSchedule, z: torch.Tensor | None = None):
    """One ancestral step with posterior variance sigma_t^2 = beta_t.

    ``z`` must be zero (or None) wherever ``t == 1``.
    """
    if eps_hat.shape != x_t.shape:
        raise ValueError("eps_hat must match x_t in shape")
    t_tensor = torch.as_tensor(t, dtype=torch.long)
    beta = _per_sample(schedule.beta(t_tensor), x_t)
    alpha = _per_sample(schedule.alpha(t_tensor), x_t)
    abar = _per_sample(schedule.alpha_bar(t_tensor), x_t)
    mean = (x_t - beta / (1.0 - abar).sqrt() * eps_hat) / alpha.sqrt()
    if z is None:
        return mean
    if z.shape != x_t.shape:
        raise ValueError("z must match x_t in shape")
    final = t_tensor == 1
    if final.any():
        rows = z if t_tensor.ndim == 0 else z[final.reshape(-1)]
        if torch.any(rows != 0):
            raise ValueError("noise must be zero at the final step t=1")
    return mean + beta.sqrt() * z


class SamplerStrategy(str, enum.Enum):
    UNIFORM = "uniform"
    PHASE_WEIGHTED = "phase_weighted"


@dataclass(frozen=True)
class TimestepSampler:
    weights: torch.Tensor
    strategy: SamplerStrategy = SamplerStrategy.UNIFORM
    phase: float = 0.0

    def __post_init__(self):
        w = self.weights
        if w.ndim != 1 or w.numel() == 0:
            raise ValueError("sampler weights must be a non-empty vector")
        if torch.any(w < 0):
            raise ValueError("sampler weights must be nonnegative")
        total = float(w.sum())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"sampler weights sum to {total}, expected 1")

    @property
    def T(self) -> int:
        return self.weights.numel()


def uniform_sampler(T: int) -> TimestepSampler:
    return TimestepSampler(torch.full((T,), 1.0 / T, dtype=torch.float64))


def segment_of(T: int) -> torch.Tensor:
    """Segment id per timestep: 0 = early [1, T/3], 1 = mid (T/3, 2T/3], 2 = late (2T/3, T]."""
    t = torch.arange(1, T + 1, dtype=torch.float64)
    seg = torch.zeros(T, dtype=torch.long)
    seg[t > T / 3] = 1
    seg[t > 2 * T / 3] = 2
    return seg


def phase_segment(phase: float) -> int:
    """Segment emphasised at a given training phase: late, then mid, then early."""
    if not 0.0 <= phase <= 1.0:
        raise ValueError("phase must lie in [0, 1]")
    if phase < 1 / 3:
        return 2
    if phase < 2 / 3:
        return 1
    return 0


def phase_weighted_sampler(T: int, phase: float, focus_mass=0.6) -> TimestepSampler:
    """Piecewise-constant density putting ``focus_mass`` on the emphasised third.

    ``focus_mass`` is a float or a (late, mid, early) triple; the rest of the
    probability is spread uniformly over the remaining timesteps.
    """
    masses = (focus_mass,) * 3 if isinstance(focus_mass, (int, float)) else tuple(focus_mass)
    if len(masses) != 3:
        raise ValueError("focus_mass needs one value or a (late, mid, early) triple")
    seg = phase_segment(phase)
    mass = float({2: masses[0], 1: masses[1], 0: masses[2]}[seg])
    if not 0.0 <= mass <= 1.0:
        raise ValueError("focus mass must lie in [0, 1]")
    in_focus = segment_of(T) == seg
    n_in = int(in_focus.sum())
    n_out = T - n_in
    if n_in == 0:
        raise ValueError(f"T={T} too small for three timestep segments")
    weights = torch.zeros(T, dtype=torch.float64)
    if n_out == 0:
        weights[:] = 1.0 / T
    else:
        weights[in_focus] = mass / n_in
        weights[~in_focus] = (1.0 - mass) / n_out
    return TimestepSampler(weights, SamplerStrategy.PHASE_WEIGHTED, phase)


def sample_timesteps(batch_size: int, sampler: TimestepSampler, generator: torch.Generator | None = None) -> torch.Tensor:
    """Draw 1-indexed timesteps i.i.d. from the sampler's weights."""
    idx = torch.multinomial(sampler.weights, batch_size, replacement=True, generator=generator)
    return idx + 1


def _clipped_eps(x_t, eps_hat, t, schedule: NoiseSchedule, bounds) -> torch.Tensor:
    abar = float(schedule.alpha_bar(t))
    x0 = ((x_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)).clamp(*bounds)
    return (x_t - math.sqrt(abar) * x0) / math.sqrt(1.0 - abar)


@torch.no_grad()
def generate(
    model,
    schedule: NoiseSchedule,
    n: int,
    shape: tuple[int, ...],
    context: torch.Tensor | None = None,
    seed: int | None = None,
    generator: torch.Generator | None = None,
    device="cpu",
    clip_x0: tuple[float, float] | None = None,
) -> torch.Tensor:
    """Run the full reverse chain from standard normal noise.

    Returns ``n x C x H x W`` samples in the model's space (pixels or latents).
    With ``clip_x0=(lo, hi)`` the implied clean image is clamped to the data
    range at every step and the noise estimate re-derived from it before the
    ancestral update; this keeps imperfect models from drifting off-range.
    """
    if context is not None and getattr(model, "context_dim", None) is None:
        raise ValueError("context supplied to an unconditional model")
    if generator is None:
        generator = torch.Generator(device="cpu")
        generator.manual_seed(0 if seed is None else seed)
    was_training = model.training
    model.eval()
    try:
        x = torch.randn((n, *shape), generator=generator).to(device)
        for t in range(schedule.T, 0, -1):
            t_batch = torch.full((n,), t, dtype=torch.long, device=device)
            eps_hat = model(x, t_batch, context) if context is not None else model(x, t_batch)
            if clip_x0 is not None:
                eps_hat = _clipped_eps(x, eps_hat, t, schedule, clip_x0)
            z = torch.randn((n, *shape), generator=generator).to(device) if t > 1 else None
            x = denoise_step(x, eps_hat, t, schedule, z)
    finally:
        model.train(was_training)
    return x
