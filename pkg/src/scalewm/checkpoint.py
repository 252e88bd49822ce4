"""Checkpoint container: a directory with manifest.json plus one
little-endian float32 flat binary per named parameter/buffer, and a snapshot
of the configuration used at save time."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from scalewm.config import FullConfig, load_config

FORMAT = "scalewm-checkpoint-v1"


class CheckpointError(ValueError):
    """Raised for corrupt or inconsistent checkpoint containers."""


def save_checkpoint(
    module: torch.nn.Module,
    path: str | Path,
    config: FullConfig | None = None,
    extra: dict | None = None,
) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = module.state_dict()
    params = {}
    # Integer buffers (usage counters etc.) are training transients and stay
    # out of the container; every float tensor is stored as little-endian f32.
    for name, tensor in state.items():
        if not tensor.is_floating_point():
            continue
        arr = tensor.detach().cpu().numpy()
        fname = name + ".bin"
        arr.astype("<f4").tofile(path / fname)
        params[name] = {"file": fname, "shape": list(arr.shape), "dtype": "float32"}
    manifest = {"format": FORMAT, "params": params, "extra": extra or {}}
    if config is not None:
        cfg = {
            "model": dataclasses.asdict(config.model),
            "schedule": dataclasses.asdict(config.schedule),
            "run": dataclasses.asdict(config.run),
            "data": dataclasses.asdict(config.data),
        }
        for sec in cfg.values():
            for k, v in sec.items():
                if isinstance(v, tuple):
                    sec[k] = list(v)
        manifest["config"] = cfg
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"missing manifest.json in {path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest in {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(
            f"unexpected checkpoint format {manifest.get('format')!r} in {path}"
        )
    return manifest


def load_checkpoint(module: torch.nn.Module, path: str | Path) -> None:
    """Load named parameters into a module built from the same config."""
    path = Path(path)
    manifest = read_manifest(path)
    state = module.state_dict()
    params = manifest["params"]
    float_keys = {k for k, v in state.items() if v.is_floating_point()}
    missing = float_keys - set(params)
    unexpected = set(params) - float_keys
    if missing or unexpected:
        raise CheckpointError(
            f"parameter names disagree in {path}: missing {sorted(missing)[:5]}, "
            f"unexpected {sorted(unexpected)[:5]}"
        )
    new_state = {}
    for name, info in params.items():
        fpath = path / info["file"]
        if not fpath.exists():
            raise CheckpointError(f"missing parameter file {fpath}")
        data = np.fromfile(fpath, dtype="<f4")
        expected = int(np.prod(info["shape"])) if info["shape"] else 1
        if data.size != expected:
            raise CheckpointError(
                f"parameter {name!r} has {data.size} floats on disk, manifest says {expected}"
            )
        tensor = torch.from_numpy(data.astype(np.float32).reshape(info["shape"]))
        if tuple(tensor.shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"parameter {name!r} has shape {tuple(tensor.shape)}, module expects "
                f"{tuple(state[name].shape)}"
            )
        new_state[name] = tensor.to(state[name].dtype)
    module.load_state_dict(new_state, strict=False)


def checkpoint_config(path: str | Path) -> FullConfig:
    """Rebuild the FullConfig stored in a checkpoint manifest."""
    import tempfile

    manifest = read_manifest(path)
    if "config" not in manifest:
        raise CheckpointError(f"checkpoint {path} carries no config snapshot")
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump(manifest["config"], fh)
        tmp = fh.name
    try:
        return load_config(tmp)
    finally:
        Path(tmp).unlink(missing_ok=True)
