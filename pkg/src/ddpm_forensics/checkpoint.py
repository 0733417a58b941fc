"""Checkpoint directories: ``model.pt`` plus a JSON manifest with a content hash."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch
import torch.nn as nn

from .denoiser import build_denoiser
from .schedule import NoiseSchedule

BLOB = "model.pt"
MANIFEST = "manifest.json"


class CheckpointError(RuntimeError):
    pass


def state_hash(model_or_state) -> str:
    """sha256 over parameter names, shapes and raw bytes, in sorted key order."""
    state = model_or_state.state_dict() if isinstance(model_or_state, nn.Module) else model_or_state
    h = hashlib.sha256()
    for key in sorted(state):
        t = state[key].detach().cpu().contiguous()
        h.update(key.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: nn.Module, directory, sched: NoiseSchedule, *, seed: int, **extra) -> Path:
    arch = getattr(model, "config", None)
    if not arch or "name" not in arch:
        raise CheckpointError("model carries no architecture descriptor")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    torch.save(state, directory / BLOB)
    manifest = {
        "architecture": arch,
        "schedule": sched.to_dict(),
        "training_seed": int(seed),
        "content_hash": state_hash(state),
        **extra,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise CheckpointError(f"no manifest in {directory}")
    return json.loads(path.read_text())


def load_checkpoint(directory, *, verify: bool = True):
    """Returns ``(model, schedule, manifest)``; raises on a hash mismatch."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    state = torch.load(directory / BLOB, map_location="cpu", weights_only=True)
    if verify and state_hash(state) != manifest["content_hash"]:
        raise CheckpointError(f"content hash mismatch for {directory}")
    model = build_denoiser(manifest["architecture"])
    model.load_state_dict(state)
    model.eval()
    return model, NoiseSchedule.from_dict(manifest["schedule"]), manifest
