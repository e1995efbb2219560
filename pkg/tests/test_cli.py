import json

import pytest
import torch
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from facediff.cli import main
from facediff.config import RunConfig, experiment_presets, json_schema
from facediff.synthetic import random_attribute_bits, write_dataset_dir

from .helpers import tiny_unet

# Reference experiment settings, keyed by shipped preset name.
REFERENCE_ROWS = {
    "unet_r3": ("unet_r3", 2e-4, 3000, True),
    "unet_r5": ("unet_r5", 2e-4, 3000, True),
    "unet_r6": ("unet_r6", 2e-4, 1500, True),
    "unet_r5_lr1e-5": ("unet_r5", 1e-5, 500, True),
    "unet_r5_lr5e-4": ("unet_r5", 5e-4, 500, True),
    "unet_r5_warmup10000": ("unet_r5", 2e-4, 10000, True),
    "unet_r5_no_ema": ("unet_r5", 2e-4, 500, False),
    "dit_large_2.7k": ("dit_large", 2e-4, 3000, True),
    "dit_small_2.7k": ("dit_small", 2e-4, 3000, True),
}
LATENT_ROWS = {
    # name: (arch preset, T, codec factor, n_train, lambda_attr, pipeline)
    "lc_unet_base": ("lc_unet_base", 1000, 4, 2700, 1.0, "cond_attr"),
    "lc_unet_3": ("lc_unet_3", 1000, 4, 2700, 1.0, "cond_attr"),
    "lc_unet_5": ("lc_unet_5", 1000, 4, 2700, 1.0, "cond_attr"),
    "lc_unet_6": ("lc_unet_6", 1000, 4, 2700, 1.0, "cond_attr"),
    "lc_unet_base_T2000": ("lc_unet_base", 2000, 4, 2700, 1.0, "cond_attr"),
    "lc_unet_3_vae8": ("lc_unet_3", 1000, 8, 2700, 1.0, "cond_attr"),
    "lc_unet_3_27k": ("lc_unet_3", 1000, 4, 27000, 1.0, "cond_attr"),
    "lc_unet_3_no_infonce": ("lc_unet_3", 1000, 4, 2700, 0.0, "cond_attr"),
    "lc_unet_3_seg": ("lc_unet_3", 1000, 4, 2700, 1.0, "cond_attr_seg"),
}


def _arch_name(cfg):
    return cfg.arch if isinstance(cfg.arch, str) else cfg.arch["preset"]


@pytest.mark.parametrize("name", sorted(REFERENCE_ROWS))
def test_unconditional_runs_have_presets(name):
    arch, lr, warmup, ema = REFERENCE_ROWS[name]
    cfg = RunConfig.load(experiment_presets()[name])
    assert (_arch_name(cfg), cfg.train.base_lr, cfg.train.warmup_steps, cfg.train.ema_enabled) == (arch, lr, warmup, ema)


@pytest.mark.parametrize("name", sorted(LATENT_ROWS))
def test_latent_runs_have_presets(name):
    arch, T, factor, n_train, lam, pipeline = LATENT_ROWS[name]
    cfg = RunConfig.load(experiment_presets()[name])
    got = (_arch_name(cfg), cfg.schedule.T, cfg.codec.downsample_factor, cfg.data.n_train, cfg.train.lambda_attr,
           cfg.pipeline.value)
    assert got == (arch, T, factor, n_train, lam, pipeline)


def test_large_data_dit_runs_and_128d_conditioning():
    presets = experiment_presets()
    for name in ("dit_large_27k", "dit_small_27k", "dit_large_27k_no_norm", "dit_small_27k_no_norm"):
        assert name in presets
    assert RunConfig.load(presets["dit_small_27k_no_norm"]).range_mode.value == "zero_one"
    small = RunConfig.load(presets["lc_unet_3_seg_128"])
    assert (small.conditioning.attr_dim, small.conditioning.seg_dim, small.conditioning.context_dim) == (128, 128, 128)


@pytest.mark.parametrize("name", sorted(experiment_presets()))
def test_preset_roundtrip(name):
    cfg = RunConfig.load(experiment_presets()[name])
    assert RunConfig.from_yaml(cfg.to_yaml()) == cfg


@settings(max_examples=25, deadline=None)
@given(lr=st.floats(2e-6, 9e-3), warmup=st.integers(0, 100), extra=st.integers(0, 100),
       lam=st.floats(0, 5), ema=st.booleans(), strategy=st.sampled_from(["uniform", "phase_weighted"]))
def test_config_roundtrip_property(lr, warmup, extra, lam, ema, strategy):
    cfg = RunConfig.model_validate({
        "pipeline": "cond_attr",
        "arch": tiny_unet(cross=True, context_dim=16),
        "conditioning": {"attr_dim": 16, "context_dim": 16},
        "train": {"base_lr": lr, "warmup_steps": warmup, "total_steps": warmup + extra + 1, "lambda_attr": lam,
                  "ema_enabled": ema, "timestep_strategy": strategy},
    })
    assert RunConfig.from_yaml(cfg.to_yaml()) == cfg


def test_unknown_keys_rejected():
    with pytest.raises(ValueError):
        RunConfig.model_validate({"pipeline": "uncond_pixel", "arch": "unet_r5", "trian": {}})
    with pytest.raises(ValueError):
        RunConfig.model_validate({"pipeline": "uncond_pixel", "arch": "unet_r5", "train": {"lr": 1e-3}})


@pytest.mark.parametrize("body", [
    {"pipeline": "cond_attr", "arch": "unet_r5"},
    {"pipeline": "uncond_pixel", "arch": "lc_unet_3"},
    {"pipeline": "uncond_latent", "arch": "lc_unet_3"},
    {"pipeline": "cond_attr", "arch": {"preset": "lc_unet_3", "context_dim": 128}},
    {"pipeline": "uncond_pixel", "arch": "unet_r5", "train": {"base_lr": 0.1}},
    {"pipeline": "uncond_pixel", "arch": "unet_r5", "train": {"warmup_steps": 10, "total_steps": 5}},
])
def test_pipeline_arch_compatibility(body):
    with pytest.raises(ValueError):
        RunConfig.model_validate(body)


def test_schema_published():
    schema = json_schema()
    assert "pipeline" in schema["properties"] and schema.get("additionalProperties") is False


@pytest.fixture
def dataset_dir(tmp_path):
    g = torch.Generator().manual_seed(0)
    images = torch.rand(6, 3, 8, 8, generator=g) * 2 - 1
    bits = random_attribute_bits(6, seed=0)
    attrs = torch.tensor([[int(c) for c in b] for b in bits], dtype=torch.float32)
    write_dataset_dir(tmp_path / "data", images, attrs)
    return tmp_path / "data"


def _write_config(path, data_root, pipeline="uncond_pixel", **extra):
    body = {
        "name": "tiny",
        "pipeline": pipeline,
        "arch": tiny_unet(cross=pipeline == "cond_attr", context_dim=16),
        "train": {"base_lr": 1e-3, "warmup_steps": 1, "total_steps": 3, "batch_size": 2, "checkpoint_every": 2},
        "schedule": {"T": 20},
        "data": {"root": str(data_root), "image_ext": ".png", "image_size": 8, "n_train": 4, "n_test": 2},
        **extra,
    }
    if pipeline == "cond_attr":
        body["conditioning"] = {"attr_dim": 16, "attr_hidden": 16, "context_dim": 16}
    path.write_text(yaml.safe_dump(body))
    return path


def test_train_sample_inspect_fid(tmp_path, dataset_dir, capsys):
    cfg = _write_config(tmp_path / "c.yaml", dataset_dir)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "final.npz").exists() and (out / "ckpt_0000002.npz").exists()
    assert len((out / "log.jsonl").read_text().splitlines()) == 3
    split = json.loads((out / "split.json").read_text())
    assert len(split["train"]) == 4 and len(split["test"]) == 2

    for name in ("a", "b"):
        assert main(["sample", "--checkpoint", str(out / "final.npz"), "--n", "3", "--seed", "5",
                     "--out", str(tmp_path / name)]) == 0
    files = sorted(str(p.relative_to(tmp_path / "a")) for p in (tmp_path / "a").rglob("*.png"))
    assert files == ["grid/grid.png", "sample_0000.png", "sample_0001.png", "sample_0002.png"]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    img = Image.open(tmp_path / "a" / "sample_0000.png")
    assert img.mode == "RGB" and img.size == (8, 8)

    capsys.readouterr()
    assert main(["inspect", "--checkpoint", str(out / "final.npz")]) == 0
    record = json.loads(capsys.readouterr().out)
    assert record["step"] == 3 and record["ema"] is True and record["parameters"] > 0

    assert main(["fid", str(dataset_dir / "images"), str(tmp_path / "a"), "--extractor", "pixel"]) == 0
    record = json.loads(capsys.readouterr().out)
    assert set(record) == {"fid", "n_real", "n_gen", "extractor_id"}
    assert record["n_real"] == 6 and record["n_gen"] == 3 and record["fid"] >= 0


def test_unconditional_checkpoint_rejects_attrs(tmp_path, dataset_dir, capsys):
    cfg = _write_config(tmp_path / "c.yaml", dataset_dir)
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
    code = main(["sample", "--checkpoint", str(tmp_path / "run" / "final.npz"), "--attrs", "1" * 40,
                 "--out", str(tmp_path / "s")])
    assert code != 0 and "attrs" in capsys.readouterr().err


def test_conditional_sampling_with_bitstring_and_file(tmp_path, dataset_dir, capsys):
    cfg = _write_config(tmp_path / "c.yaml", dataset_dir, pipeline="cond_attr")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    ckpt = str(tmp_path / "run" / "final.npz")
    assert main(["sample", "--checkpoint", ckpt, "--n", "2", "--attrs", "01" * 20, "--out", str(tmp_path / "s1")]) == 0
    (tmp_path / "attrs.txt").write_text("\n".join(random_attribute_bits(2, seed=1)))
    assert main(["sample", "--checkpoint", ckpt, "--n", "2", "--attrs", str(tmp_path / "attrs.txt"),
                 "--out", str(tmp_path / "s2")]) == 0
    assert main(["sample", "--checkpoint", ckpt, "--n", "2", "--out", str(tmp_path / "s3")]) != 0
    assert main(["sample", "--checkpoint", ckpt, "--n", "2", "--attrs", "012", "--out", str(tmp_path / "s4")]) != 0


def test_train_validation_failure_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"pipeline": "cond_attr", "arch": "unet_r5"}))
    assert main(["train", "--config", str(bad)]) != 0
    assert "error" in capsys.readouterr().err
    missing = _write_config(tmp_path / "m.yaml", tmp_path / "nowhere")
    assert main(["train", "--config", str(missing)]) != 0
    assert "missing paths" in capsys.readouterr().err


def test_schema_presets_validate_commands(capsys):
    assert main(["schema"]) == 0
    assert "properties" in json.loads(capsys.readouterr().out)
    assert main(["presets"]) == 0
    assert "lc_unet_3" in capsys.readouterr().out
    assert main(["validate", "--config", "lc_unet_3"]) == 0
