import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from facediff.ddpm import (
    TimestepSampler,
    build_schedule,
    denoise_step,
    forward_noise,
    generate,
    phase_segment,
    phase_weighted_sampler,
    sample_timesteps,
    segment_of,
    uniform_sampler,
)

from .oracles import alpha_bar_product


def test_default_schedule_tables():
    s = build_schedule(1000)
    assert s.betas.shape == s.alphas.shape == s.alpha_bars.shape == (1000,)
    assert torch.all(s.betas > 0) and torch.all(s.betas < 1)
    assert torch.allclose(s.alphas, 1 - s.betas)
    assert torch.all(s.alpha_bars[1:] < s.alpha_bars[:-1])
    assert s.alpha_bar(1) < 1


def test_two_thousand_steps_builds():
    s = build_schedule(2000)
    assert s.T == 2000 and torch.all(s.alpha_bars[1:] < s.alpha_bars[:-1])


def test_single_step_schedule():
    s = build_schedule(1, 0.5, 0.5)
    assert s.alpha_bars.tolist() == [0.5]


@pytest.mark.parametrize("t", [1, 2, 250, 500, 999, 1000])
def test_alpha_bar_matches_product_oracle(t):
    s = build_schedule(1000)
    assert float(s.alpha_bar(t)) == pytest.approx(alpha_bar_product(1000, 1e-4, 0.02, t), rel=1e-12)


@pytest.mark.parametrize("start,end", [(0.02, 1e-4), (0.0, 0.02), (1e-4, 1.0)])
def test_bad_endpoints(start, end):
    with pytest.raises(ValueError):
        build_schedule(1000, start, end)


def test_bad_T():
    with pytest.raises(ValueError):
        build_schedule(0)


def test_forward_noise_zero_eps():
    s = build_schedule(1000)
    x0 = torch.randn(4, 3, 8, 8, dtype=torch.float64)
    out = forward_noise(x0, 300, torch.zeros_like(x0), s)
    assert torch.allclose(out, math.sqrt(float(s.alpha_bar(300))) * x0)


def test_forward_noise_per_sample_t():
    s = build_schedule(1000)
    x0 = torch.randn(3, 2, dtype=torch.float64)
    eps = torch.randn(3, 2, dtype=torch.float64)
    t = torch.tensor([1, 500, 1000])
    out = forward_noise(x0, t, eps, s)
    for i, ti in enumerate(t.tolist()):
        ab = float(s.alpha_bar(ti))
        assert torch.allclose(out[i], math.sqrt(ab) * x0[i] + math.sqrt(1 - ab) * eps[i])


def test_forward_noise_errors():
    s = build_schedule(10)
    with pytest.raises(ValueError):
        forward_noise(torch.zeros(2, 3), 1, torch.zeros(2, 4), s)
    with pytest.raises(ValueError):
        forward_noise(torch.zeros(2, 3), 0, torch.zeros(2, 3), s)
    with pytest.raises(ValueError):
        forward_noise(torch.zeros(2, 3), 11, torch.zeros(2, 3), s)


@settings(max_examples=30, deadline=None)
@given(beta=st.floats(1e-4, 0.9), seed=st.integers(0, 10_000))
def test_single_step_inversion(beta, seed):
    s = build_schedule(1, beta, beta)
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    xt = forward_noise(x0, 1, eps, s)
    rec = denoise_step(xt, eps, 1, s, torch.zeros_like(xt))
    assert torch.allclose(rec, x0, atol=1e-5)


def test_denoise_step_rejects_noise_at_final_step():
    s = build_schedule(10)
    x = torch.zeros(2, 3)
    with pytest.raises(ValueError):
        denoise_step(x, x, 1, s, torch.ones(2, 3))
    with pytest.raises(ValueError):
        denoise_step(x, x, torch.tensor([5, 1]), s, torch.ones(2, 3))
    # rows with t > 1 may carry noise
    out = denoise_step(x, x, torch.tensor([5, 1]), s, torch.tensor([[1.0] * 3, [0.0] * 3]))
    assert out.shape == x.shape


def test_denoise_step_deterministic_at_t1():
    s = build_schedule(10)
    x = torch.randn(2, 3)
    e = torch.randn(2, 3)
    assert torch.equal(denoise_step(x, e, 1, s, torch.zeros(2, 3)), denoise_step(x, e, 1, s))


def test_denoise_step_out_of_range():
    s = build_schedule(10)
    with pytest.raises(ValueError):
        denoise_step(torch.zeros(1), torch.zeros(1), 11, s)


def test_uniform_sampler_thirds():
    g = torch.Generator().manual_seed(0)
    t = sample_timesteps(100_000, uniform_sampler(1000), g)
    assert t.min() >= 1 and t.max() <= 1000
    seg = segment_of(1000)[t - 1]
    for k in range(3):
        assert float((seg == k).float().mean()) == pytest.approx(1 / 3, abs=0.01)


def test_sampler_weight_validation():
    with pytest.raises(ValueError):
        TimestepSampler(torch.full((10,), 0.09, dtype=torch.float64))
    with pytest.raises(ValueError):
        TimestepSampler(torch.tensor([], dtype=torch.float64))
    with pytest.raises(ValueError):
        TimestepSampler(torch.tensor([1.5, -0.5], dtype=torch.float64))


def test_phase_segments():
    assert phase_segment(0.0) == 2
    assert phase_segment(0.5) == 1
    assert phase_segment(2 / 3) == 0
    assert phase_segment(1.0) == 0
    with pytest.raises(ValueError):
        phase_segment(1.5)


@settings(max_examples=40, deadline=None)
@given(T=st.integers(3, 3000), phase=st.floats(0, 1), mass=st.floats(0, 1))
def test_phase_sampler_weights_are_a_distribution(T, phase, mass):
    w = phase_weighted_sampler(T, phase, mass).weights
    assert torch.all(w >= 0)
    assert float(w.sum()) == pytest.approx(1.0, abs=1e-9)
    focus = segment_of(T) == phase_segment(phase)
    assert float(w[focus].sum()) == pytest.approx(mass, abs=1e-9)


def test_phase_sampler_triple_masses():
    w = phase_weighted_sampler(999, 0.5, (0.6, 0.8, 0.7)).weights
    assert float(w[segment_of(999) == 1].sum()) == pytest.approx(0.8)


class _Zero(torch.nn.Module):
    context_dim = None

    def forward(self, x, t, context=None):
        return torch.zeros_like(x)


def test_generate_shape_and_determinism():
    s = build_schedule(20)
    a = generate(_Zero(), s, 4, (3, 8, 8), seed=3)
    b = generate(_Zero(), s, 4, (3, 8, 8), seed=3)
    assert a.shape == (4, 3, 8, 8)
    assert torch.equal(a, b)
    assert not torch.equal(a, generate(_Zero(), s, 4, (3, 8, 8), seed=4))


def test_generate_rejects_context_for_unconditional():
    with pytest.raises(ValueError):
        generate(_Zero(), build_schedule(5), 1, (3, 4, 4), context=torch.zeros(1, 1, 8), seed=0)


class _PointDenoiser(torch.nn.Module):
    """Exact noise prediction when all data sits at one constant image."""

    context_dim = None

    def __init__(self, schedule, value):
        super().__init__()
        self.schedule, self.value = schedule, value

    def forward(self, x, t, context=None):
        ab = self.schedule.alpha_bar(t).to(x.dtype).view(-1, 1, 1, 1)
        return (x - ab.sqrt() * self.value) / (1 - ab).sqrt()


def test_generate_clip_wide_bounds_is_noop():
    s = build_schedule(30)
    model = _PointDenoiser(s, 0.4)
    plain = generate(model, s, 3, (3, 4, 4), seed=1)
    wide = generate(model, s, 3, (3, 4, 4), seed=1, clip_x0=(-100.0, 100.0))
    assert torch.allclose(plain, wide, atol=1e-4)
    assert torch.allclose(plain, torch.full_like(plain, 0.4), atol=1e-3)


def test_generate_clip_pulls_samples_into_bounds():
    s = build_schedule(30)
    out = generate(_PointDenoiser(s, 2.0), s, 3, (3, 4, 4), seed=1, clip_x0=(-1.0, 1.0))
    assert torch.allclose(out, torch.ones_like(out), atol=1e-3)
