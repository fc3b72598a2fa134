"""Versioned checkpoint container for HAND parameters."""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict
from pathlib import Path
from typing import Any

import torch

from .model import HAND, ModelConfig

FORMAT_VERSION = 1


class CheckpointVersionError(RuntimeError):
    def __init__(self, found, expected=FORMAT_VERSION):
        super().__init__(f"checkpoint format version {found} does not match supported version {expected}")
        self.found = found
        self.expected = expected


def build_checkpoint(
    model: HAND,
    step: int = 0,
    master_seed: int = 0,
    train_config: dict[str, Any] | None = None,
    worker_mode: str = "single",
) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(model.config),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "step": int(step),
        "master_seed": int(master_seed),
        "train_config": dict(train_config or {}),
        "worker_mode": worker_mode,
    }


def checkpoint_bytes(ckpt: dict[str, Any]) -> bytes:
    buf = io.BytesIO()
    torch.save(ckpt, buf)
    return buf.getvalue()


def save_checkpoint(ckpt: dict[str, Any], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    version = ckpt.get("format_version") if isinstance(ckpt, dict) else None
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(version)
    return ckpt


def model_from_checkpoint(ckpt: dict[str, Any]) -> HAND:
    model = HAND(ModelConfig(**ckpt["model_config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model


def state_digest(ckpt: dict[str, Any]) -> str:
    """SHA-256 over parameter names, shapes, dtypes and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(ckpt["state_dict"]):
        t = ckpt["state_dict"][name].contiguous()
        h.update(name.encode())
        h.update(str((tuple(t.shape), str(t.dtype))).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
