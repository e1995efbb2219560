"""Low-rank adapters on attention projections.

``inject_lora`` wraps the selected ``nn.Linear`` projections so that their
output becomes ``W x + (alpha / r) * B (A x)`` with ``B`` starting at zero, and
freezes every other parameter. ``merge_lora`` folds the update back into
plain linear layers.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ADAPTER_FORMAT_VERSION = 1
# Query/key/value/output projections of every self- and cross-attention module.
DEFAULT_TARGETS = r"(^|\.)(to_q|to_k|to_v|to_out)$"


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, r: int = 8, alpha: float = 8.0, init_std: float = 0.01,
                 generator: torch.Generator | None = None):
        super().__init__()
        if r < 1:
            raise ValueError("rank must be positive")
        self.base = base
        self.r = r
        self.alpha = alpha
        d_out, d_in = base.weight.shape
        a = torch.randn(r, d_in, generator=generator, dtype=base.weight.dtype) * init_std
        self.lora_A = nn.Parameter(a.to(base.weight.device))
        self.lora_B = nn.Parameter(torch.zeros(d_out, r, dtype=base.weight.dtype, device=base.weight.device))
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    def delta_weight(self) -> torch.Tensor:
        return self.scale * (self.lora_B @ self.lora_A)

    def forward(self, x):
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)

    def merged(self) -> nn.Linear:
        out = nn.Linear(self.in_features, self.out_features, bias=self.base.bias is not None,
                        device=self.base.weight.device, dtype=self.base.weight.dtype)
        with torch.no_grad():
            out.weight.copy_(self.base.weight + self.delta_weight())
            if self.base.bias is not None:
                out.bias.copy_(self.base.bias)
        return out


def _set_submodule(root: nn.Module, name: str, module: nn.Module):
    parent_name, _, child = name.rpartition(".")
    parent = root.get_submodule(parent_name) if parent_name else root
    setattr(parent, child, module)


def lora_layers(model: nn.Module) -> dict[str, LoRALinear]:
    return {name: m for name, m in model.named_modules() if isinstance(m, LoRALinear)}


def inject_lora(model: nn.Module, target=DEFAULT_TARGETS, r: int = 8, alpha: float = 8.0,
                seed: int | None = None) -> nn.Module:
    """Wrap matching linear layers in place and freeze the rest of ``model``.

    ``target`` is a regex searched against module names, or a predicate
    ``(name, module) -> bool``.
    """
    if callable(target):
        match = target
    else:
        pattern = re.compile(target)
        match = lambda name, module: bool(pattern.search(name))  # noqa: E731
    names = [n for n, m in model.named_modules() if isinstance(m, nn.Linear) and match(n, m)]
    if not names:
        raise ValueError(f"target {target!r} matches no linear layer")
    for p in model.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    for name in names:
        _set_submodule(model, name, LoRALinear(model.get_submodule(name), r, alpha, generator=gen))
    model.lora_config = {"target": target if isinstance(target, str) else None, "r": r, "alpha": alpha}
    return model


def merge_lora(model: nn.Module) -> nn.Module:
    layers = lora_layers(model)
    if not layers:
        raise ValueError("model has no unmerged LoRA layers (already merged?)")
    for name, layer in layers.items():
        _set_submodule(model, name, layer.merged())
    model.__dict__.pop("lora_config", None)
    return model


def lora_parameters(model: nn.Module):
    for layer in lora_layers(model).values():
        yield layer.lora_A
        yield layer.lora_B


def added_parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in lora_parameters(model))


def save_adapters(model: nn.Module, path) -> None:
    """Write only the adapter tensors plus selector, rank and scale."""
    layers = lora_layers(model)
    if not layers:
        raise ValueError("model has no LoRA layers")
    cfg = getattr(model, "lora_config", {"target": None})
    meta = {
        "format_version": ADAPTER_FORMAT_VERSION,
        "target": cfg.get("target"),
        "layers": {name: {"r": l.r, "alpha": l.alpha} for name, l in layers.items()},
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for name, layer in layers.items():
        arrays[f"{name}/A"] = layer.lora_A.detach().cpu().numpy()
        arrays[f"{name}/B"] = layer.lora_B.detach().cpu().numpy()
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_adapters(model: nn.Module, path) -> nn.Module:
    """Inject adapters recorded in ``path`` into a base model and load their weights."""
    with np.load(Path(path)) as data:
        meta = json.loads(data["__meta__"].tobytes().decode())
        if meta.get("format_version") != ADAPTER_FORMAT_VERSION:
            raise ValueError(f"unsupported adapter format_version {meta.get('format_version')}")
        for p in model.parameters():
            p.requires_grad_(False)
        for name, spec in meta["layers"].items():
            layer = LoRALinear(model.get_submodule(name), spec["r"], spec["alpha"])
            with torch.no_grad():
                layer.lora_A.copy_(torch.from_numpy(data[f"{name}/A"]))
                layer.lora_B.copy_(torch.from_numpy(data[f"{name}/B"]))
            _set_submodule(model, name, layer)
    model.lora_config = {"target": meta.get("target"), "r": None, "alpha": None}
    return model
