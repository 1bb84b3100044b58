"""Checkpoint files: a named float32 tensor table plus a JSON header, stored as ``.npz``."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

FORMAT_VERSION = 1
_META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, config: dict, tensors: dict[str, np.ndarray | torch.Tensor],
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arrays[name] = np.asarray(value, dtype=np.float32)
    meta = {"format_version": FORMAT_VERSION, "kind": kind, "config": config,
            "shapes": {k: list(v.shape) for k, v in arrays.items()}, "extra": extra or {}}
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_checkpoint(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path) as data:
        if _META_KEY not in data:
            raise CheckpointError(f"{path}: missing checkpoint header")
        meta = json.loads(data[_META_KEY].tobytes().decode())
        arrays = {k: data[k] for k in data.files if k != _META_KEY}
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointError(f"{path}: checkpoint kind {meta.get('kind')!r}, expected {kind!r}")
    for name, shape in meta["shapes"].items():
        if list(arrays[name].shape) != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {arrays[name].shape}, header says {shape}")
    return meta, arrays


def module_tensors(module: nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state = module.state_dict()
    new_state = {}
    for name, current in state.items():
        key = f"{prefix}.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks tensor {key}")
        value = arrays[key]
        if tuple(value.shape) != tuple(current.shape):
            raise CheckpointError(f"tensor {key}: checkpoint shape {value.shape}, model shape {tuple(current.shape)}")
        new_state[name] = torch.from_numpy(np.array(value)).to(current.dtype)
    module.load_state_dict(new_state)


def optimizer_tensors(optimizer: torch.optim.Optimizer, prefix: str) -> tuple[dict[str, torch.Tensor], dict]:
    sd = optimizer.state_dict()
    tensors, scalars = {}, {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                tensors[f"{prefix}.{idx}.{key}"] = value
            else:
                scalars[f"{idx}.{key}"] = value
    return tensors, {"param_groups": sd["param_groups"], "scalars": scalars}


def load_optimizer(optimizer: torch.optim.Optimizer, arrays: dict[str, np.ndarray], prefix: str, header: dict) -> None:
    state: dict[int, dict] = {}
    for key, value in arrays.items():
        if key.startswith(prefix + "."):
            idx, name = key[len(prefix) + 1:].split(".", 1)
            state.setdefault(int(idx), {})[name] = torch.from_numpy(np.array(value))
    for key, value in header.get("scalars", {}).items():
        idx, name = key.split(".", 1)
        state.setdefault(int(idx), {})[name] = value
    optimizer.load_state_dict({"state": state, "param_groups": header["param_groups"]})
