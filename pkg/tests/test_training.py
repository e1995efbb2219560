import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from facediff.dataio import TensorFaceDataset
from facediff.training import (
    FORMAT_VERSION,
    CheckpointError,
    EMAState,
    ema_update,
    fit,
    load_checkpoint,
    lr_at_step,
    make_state,
    read_checkpoint_meta,
    save_checkpoint,
    training_step,
)

from . import oracles
from .helpers import tiny_config


def _data(n=8, size=8, attrs=False, masks=False, seed=0):
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(n, 3, size, size, generator=g) * 2 - 1
    a = None
    if attrs:
        a = (torch.rand(n, 40, generator=g) < 0.3).float()
        a[a.sum(1) == 0, 0] = 1
    m = (torch.rand(n, 10, size, size, generator=g) < 0.5).float() if masks else None
    return TensorFaceDataset(images, a, m)


def test_lr_examples():
    assert lr_at_step(0, 2e-4, 3000) == 0.0
    assert lr_at_step(1, 2e-4, 3000) == pytest.approx(2e-4 / 3000)
    assert lr_at_step(3000, 2e-4, 3000) == pytest.approx(2e-4)
    assert lr_at_step(6000, 2e-4, 3000) == pytest.approx(2e-4)
    assert lr_at_step(5, 1e-3, 0) == 1e-3
    with pytest.raises(ValueError):
        lr_at_step(-1, 1e-3, 10)


@settings(max_examples=50, deadline=None)
@given(warmup=st.integers(0, 5000), base=st.floats(1e-6, 1e-2), steps=st.lists(st.integers(0, 10_000), min_size=2))
def test_lr_monotone_and_matches_oracle(warmup, base, steps):
    steps = sorted(steps)
    lrs = [lr_at_step(s, base, warmup) for s in steps]
    assert all(a <= b for a, b in zip(lrs, lrs[1:]))
    for s, lr in zip(steps, lrs):
        assert lr == pytest.approx(oracles.warmup_lr(s, base, warmup))
        assert lr <= base


def test_cosine_decay_option():
    assert lr_at_step(100, 1e-3, 0, 100, "cosine") == pytest.approx(0.0, abs=1e-12)
    assert lr_at_step(50, 1e-3, 0, 100, "cosine") == pytest.approx(5e-4)


def test_ema_degenerate_decays():
    params = {"w": torch.tensor([1.0, 2.0])}
    ema = EMAState({"w": torch.zeros(2)}, 0.0)
    ema_update(ema, params)
    assert torch.equal(ema.shadow["w"], params["w"])
    ema = EMAState({"w": torch.zeros(2)}, 1.0)
    ema_update(ema, params)
    assert torch.equal(ema.shadow["w"], torch.zeros(2))


def test_ema_key_and_shape_checks():
    ema = EMAState({"w": torch.zeros(2)}, 0.5)
    with pytest.raises(KeyError):
        ema_update(ema, {"v": torch.zeros(2)})
    with pytest.raises(ValueError):
        ema_update(ema, {"w": torch.zeros(3)})


@pytest.mark.parametrize("pipeline", ["uncond_pixel", "uncond_latent", "cond_attr", "cond_attr_seg"])
def test_training_step_each_pipeline(pipeline):
    cfg = tiny_config(pipeline)
    size = 32 if pipeline in ("uncond_latent", "cond_attr_seg") else 8
    data = _data(4, size, attrs=cfg.pipeline.conditional, masks=pipeline == "cond_attr_seg")
    state = make_state(cfg)
    stats = training_step(data.__getitem__(slice(0, 4)), state)
    assert state.step == 1 and np.isfinite(stats["total_loss"])
    if cfg.pipeline.conditional:
        assert {"attr_loss", "skipped_rows", "lambda_attr"} <= set(stats)
        assert stats["total_loss"] == pytest.approx(stats["diffusion_loss"] + stats["lambda_attr"] * stats["attr_loss"],
                                                    abs=1e-9)
    else:
        assert "attr_loss" not in stats
        assert stats["total_loss"] == pytest.approx(stats["diffusion_loss"], abs=1e-9)


def test_lambda_zero_embedder_grad_through_cross_attention_only():
    cfg = tiny_config("cond_attr", lambda_attr=0.0)
    data = _data(4, 8, attrs=True)
    state = make_state(cfg)
    torch.nn.init.normal_(state.pipeline.denoiser.conv_out.weight, std=0.1)
    stats = training_step(data[slice(0, 4)], state)
    assert stats["total_loss"] == pytest.approx(stats["diffusion_loss"], abs=1e-9)
    emb = state.pipeline.conditioner.attr_embedder
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in emb.parameters())


def test_non_finite_loss_aborts():
    state = make_state(tiny_config())
    batch = {"image": torch.full((4, 3, 8, 8), float("nan"))}
    with pytest.raises(FloatingPointError, match="non-finite"):
        training_step(batch, state)


def test_fit_writes_log_and_checkpoints(tmp_path):
    cfg = tiny_config(steps=4, checkpoint_every=2)
    state = fit(cfg, _data(), out_dir=tmp_path)
    assert state.step == 4
    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [1, 2, 3, 4]
    assert {"diffusion_loss", "lr", "total_loss"} <= set(records[0])
    assert (tmp_path / "ckpt_0000002.npz").exists() and (tmp_path / "final.npz").exists()


def test_fit_empty_dataset():
    with pytest.raises(ValueError):
        fit(tiny_config(), TensorFaceDataset(torch.zeros(0, 3, 8, 8)))


def test_checkpoint_roundtrip_tensors(tmp_path):
    state = fit(tiny_config(steps=3), _data())
    save_checkpoint(state, tmp_path / "c.npz")
    back = load_checkpoint(tmp_path / "c.npz")
    assert back.step == 3
    for (n, a), (_, b) in zip(state.pipeline.state_dict().items(), back.pipeline.state_dict().items()):
        assert torch.equal(a, b), n
    for n in state.ema.shadow:
        assert torch.equal(state.ema.shadow[n], back.ema.shadow[n])
    assert torch.equal(state.noise_gen.get_state(), back.noise_gen.get_state())


def test_ema_and_raw_weights_both_available(tmp_path):
    state = fit(tiny_config(steps=3, ema_decay=0.5), _data())
    torch.nn.init.normal_(state.pipeline.denoiser.conv_out.weight)
    save_checkpoint(state, tmp_path / "c.npz")
    back = load_checkpoint(tmp_path / "c.npz")
    raw = back.sample(2, seed=0, use_ema=False)
    ema = back.sample(2, seed=0, use_ema=True)
    assert raw.shape == ema.shape == (2, 3, 8, 8)
    assert not torch.equal(raw, ema)


def test_checkpoint_version_bump(tmp_path):
    state = make_state(tiny_config())
    save_checkpoint(state, tmp_path / "c.npz")
    with np.load(tmp_path / "c.npz") as data:
        arrays = dict(data)
    meta = json.loads(arrays["__meta__"].tobytes())
    meta["format_version"] = FORMAT_VERSION + 1
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(tmp_path / "bumped.npz", **arrays)
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(tmp_path / "bumped.npz")


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "bad.npz").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        read_checkpoint_meta(tmp_path / "bad.npz")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.npz")


def test_resume_matches_uninterrupted(tmp_path):
    torch.set_num_threads(1)
    data = _data()
    straight = fit(tiny_config(steps=6), data)
    fit(tiny_config(steps=3), data, out_dir=tmp_path)
    resumed = fit(tiny_config(steps=6), data, resume=tmp_path / "final.npz")
    assert [h["total_loss"] for h in resumed.history] == [h["total_loss"] for h in straight.history[3:]]


def test_resume_rejects_different_config(tmp_path):
    fit(tiny_config(steps=2), _data(), out_dir=tmp_path)
    with pytest.raises(CheckpointError):
        fit(tiny_config(steps=4, base_lr=5e-4), _data(), resume=tmp_path / "final.npz")


def test_latent_pipeline_trains_conv_codec_first():
    cfg = tiny_config("uncond_latent").model_copy(deep=True)
    from facediff.config import RunConfig

    body = cfg.to_dict()
    body["codec"] = {"kind": "conv_ae", "downsample_factor": 4, "image_size": 32, "hidden_channels": 8, "train_steps": 3}
    state = fit(RunConfig.model_validate(body), _data(4, 32))
    assert state.pipeline.codec.frozen
    assert "codec." not in " ".join(state.ema.shadow)
