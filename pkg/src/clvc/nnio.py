"""Bridging torch modules to the checkpoint container."""

from __future__ import annotations

import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint


def module_tensors(module: torch.nn.Module) -> dict:
    """state_dict as float32 numpy arrays, parameters and buffers alike."""
    out = {}
    for name, value in module.state_dict().items():
        out[name] = value.detach().cpu().numpy().astype(np.float32)
    return out


def load_module_tensors(module: torch.nn.Module, tensors: dict) -> None:
    """Strict load: every entry must match the module's state_dict shape."""
    state = module.state_dict()
    missing = sorted(set(state) - set(tensors))
    extra = sorted(set(tensors) - set(state))
    if missing or extra:
        raise CheckpointError(
            f"state mismatch: missing {missing or 'none'}, unexpected {extra or 'none'}"
        )
    converted = {}
    for name, arr in tensors.items():
        want = tuple(state[name].shape)
        if tuple(arr.shape) != want:
            raise CheckpointError(f"tensor {name!r}: shape {arr.shape}, expected {want}")
        converted[name] = torch.as_tensor(arr, dtype=state[name].dtype)
    module.load_state_dict(converted)


def save_module(module: torch.nn.Module, stage: str, metadata: dict, path) -> None:
    save_checkpoint(Checkpoint(stage=stage, metadata=metadata, tensors=module_tensors(module)), path)


def load_module_into(module: torch.nn.Module, path, stage: str | None = None) -> Checkpoint:
    """Load a checkpoint into module, optionally insisting on its stage tag."""
    ckpt = load_checkpoint(path)
    if stage is not None and ckpt.stage != stage:
        raise CheckpointError(f"checkpoint stage {ckpt.stage!r}, expected {stage!r}")
    load_module_tensors(module, ckpt.tensors)
    return ckpt
