"""Tiny configurations shared by the training, CLI and acceptance tests."""

from facediff.config import RunConfig


def tiny_unet(size=8, channels=(8, 16), cross=False, context_dim=None, attention=True):
    lo, hi = channels
    deep = "cross_attn" if cross else ("attn" if attention else None)
    down = [{"kind": "down", "out_channels": lo}, {"kind": f"{deep}_down" if deep else "down", "out_channels": hi}]
    up = [{"kind": f"{deep}_up" if deep else "up", "out_channels": hi}, {"kind": "up", "out_channels": lo}]
    arch = {"type": "unet", "input_size": size, "in_channels": 3, "norm_groups": 4, "layers_per_block": 1,
            "down_blocks": down, "up_blocks": up}
    if cross:
        arch["context_dim"] = context_dim
    return arch


def tiny_config(pipeline="uncond_pixel", steps=4, **train):
    body = {"pipeline": pipeline, "train": {"base_lr": 1e-3, "warmup_steps": 2, "total_steps": steps,
                                            "batch_size": 4, **train}}
    if pipeline == "uncond_pixel":
        body["arch"] = tiny_unet()
    elif pipeline == "uncond_latent":
        body["arch"] = {**tiny_unet(), "in_channels": 4}
        body["codec"] = {"kind": "identity_downscale", "downsample_factor": 4, "image_size": 32}
    elif pipeline == "cond_attr":
        body["arch"] = tiny_unet(cross=True, context_dim=16)
        body["conditioning"] = {"attr_dim": 16, "attr_hidden": 16, "context_dim": 16}
    elif pipeline == "cond_attr_seg":
        body["arch"] = tiny_unet(size=32, cross=True, context_dim=16)
        body["conditioning"] = {"attr_dim": 16, "attr_hidden": 16, "seg_dim": 8, "context_dim": 16,
                                "seg_stage_widths": [4, 4, 4, 4]}
    else:
        raise ValueError(pipeline)
    return RunConfig.model_validate(body)
