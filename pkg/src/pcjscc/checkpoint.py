"""Checkpoint archive: named tensors in an .npz plus a JSON manifest.

Layout of a checkpoint directory:
    manifest.json   widths/config, normalizer state, tensor index, train state
    tensors.npz     model parameters and buffers, name -> row-major array
    optim.npz       optional Adam state for exact training resume
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .channel import Normalizer
from .codec import Codec, CodecConfig

FORMAT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    codec: Codec,
    normalizer: Normalizer,
    train_state: dict | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    tensors = {name: t.detach().cpu().numpy() for name, t in codec.state_dict().items()}
    np.savez(path / "tensors.npz", **tensors)

    manifest = {
        "format_version": FORMAT_VERSION,
        "model": codec.cfg.to_dict(),
        "normalizer": normalizer.state_dict(),
        "tensors": {name: list(a.shape) for name, a in tensors.items()},
        "train_state": train_state or {},
    }
    if optimizer is not None:
        state = optimizer.state_dict()
        manifest["optimizer"] = {"param_groups": state["param_groups"]}
        flat = {}
        for idx, entry in state["state"].items():
            for key, value in entry.items():
                flat[f"{idx}.{key}"] = (
                    value.detach().cpu().numpy() if torch.is_tensor(value)
                    else np.asarray(value)
                )
        np.savez(path / "optim.npz", **flat)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[Codec, Normalizer, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    cfg = CodecConfig.from_dict(manifest["model"])
    codec = Codec(cfg)
    with np.load(path / "tensors.npz") as archive:
        state = {name: torch.from_numpy(archive[name]) for name in archive.files}
    codec.load_state_dict(state)
    normalizer = Normalizer.from_state_dict(manifest["normalizer"])
    return codec, normalizer, manifest


def load_optimizer_state(path: str | Path, manifest: dict) -> dict | None:
    """Rebuild the Adam state_dict saved next to a checkpoint, if present."""
    path = Path(path)
    if "optimizer" not in manifest or not (path / "optim.npz").exists():
        return None
    state: dict = {}
    with np.load(path / "optim.npz") as archive:
        for name in archive.files:
            idx, key = name.split(".", 1)
            state.setdefault(int(idx), {})[key] = torch.from_numpy(archive[name])
    return {"state": state, "param_groups": manifest["optimizer"]["param_groups"]}
