"""Schedules, model-scaling rules, and run configuration.

Everything here is immutable after construction and safe to share across
workers. The on-disk format is a flat JSON document with four sections
(``model``, ``schedule``, ``run``, ``data``); unknown keys are rejected so
that a config file pins a run exactly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


@dataclass(frozen=True)
class ScaleSchedule:
    """Ordered spatial scales for observed vs future frames.

    ``obs_scales`` are the side lengths of the square token maps emitted for
    observed frames, ``fut_scales`` the sparse subset used for future frames.
    ``latent_base`` is the side length of the finest latent grid the encoder
    produces (16 for 64x64 frames at stride 4).
    """

    obs_scales: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 8, 10, 13, 16)
    fut_scales: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    latent_base: int = 16

    def __post_init__(self):
        object.__setattr__(self, "obs_scales", tuple(int(s) for s in self.obs_scales))
        object.__setattr__(self, "fut_scales", tuple(int(s) for s in self.fut_scales))
        for name, scales in (("obs_scales", self.obs_scales), ("fut_scales", self.fut_scales)):
            if not scales:
                raise ConfigError(f"{name} must be non-empty")
            if any(s <= 0 for s in scales):
                raise ConfigError(f"{name} entries must be positive, got {list(scales)}")
            if any(a >= b for a, b in zip(scales, scales[1:])):
                raise ConfigError(f"{name} must be strictly increasing, got {list(scales)}")
            if any(s > self.latent_base for s in scales):
                raise ConfigError(
                    f"{name} entries must not exceed latent_base={self.latent_base}"
                )
        if len(self.fut_scales) >= len(self.obs_scales):
            raise ConfigError(
                "fut_scales must be a proper prefix of obs_scales "
                f"(got {len(self.fut_scales)} vs {len(self.obs_scales)} scales)"
            )
        if self.obs_scales[: len(self.fut_scales)] != self.fut_scales:
            raise ConfigError(
                f"fut_scales {list(self.fut_scales)} is not a prefix of "
                f"obs_scales {list(self.obs_scales)}"
            )

    def scales_for_role(self, role: str) -> tuple[int, ...]:
        if role == "observed":
            return self.obs_scales
        if role == "future":
            return self.fut_scales
        raise ConfigError(f"unknown role {role!r}, expected 'observed' or 'future'")


@dataclass(frozen=True)
class ModelConfig:
    """Transformer and codebook dimensions."""

    depth: int = 4
    width: int = 256
    heads: int = 4
    dropout: float = 0.1 * 4 / 24
    ffn_dim: int = 1024
    action_dim: int = 2
    codebook_size: int = 512
    embed_dim: int = 32

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        for name in ("width", "heads", "ffn_dim", "action_dim", "codebook_size", "embed_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.width % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide width ({self.width})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class RunConfig:
    """Training/sampling knobs shared across commands."""

    context_frames: int = 2
    sequence_length: int = 4
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 2000
    grad_clip: float = 1.0
    weight_decay_tokenizer: float = 0.0
    weight_decay_transformer: float = 0.01
    top_k: int = 100
    top_p: float = 1.0
    temperature: float = 1.0
    prompt_dropout: float = 0.5
    reward_loss_weight: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.context_frames < 1:
            raise ConfigError(f"context_frames must be >= 1, got {self.context_frames}")
        if self.sequence_length <= self.context_frames:
            raise ConfigError(
                f"sequence_length ({self.sequence_length}) must exceed "
                f"context_frames ({self.context_frames})"
            )
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if not 0.0 <= self.top_p <= 1.0:
            raise ConfigError(f"top_p must be in [0, 1], got {self.top_p}")
        if not 0.0 <= self.prompt_dropout <= 1.0:
            raise ConfigError(f"prompt_dropout must be in [0, 1], got {self.prompt_dropout}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.warmup_steps < 0 or self.total_steps <= 0:
            raise ConfigError("warmup_steps must be >= 0 and total_steps > 0")
        if self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")


@dataclass(frozen=True)
class DataConfig:
    """Synthetic environment and image geometry."""

    env: str = "sprites"
    image_size: int = 64
    num_objects: int = 1
    episode_length: int = 40
    grid_size: int = 12
    confidence_threshold: float = 0.5
    displacement_window: int = 4
    displacement_ratio: float = 0.02

    def __post_init__(self):
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if self.episode_length < 2:
            raise ConfigError(f"episode_length must be >= 2, got {self.episode_length}")
        if self.num_objects < 1:
            raise ConfigError(f"num_objects must be >= 1, got {self.num_objects}")
        if self.grid_size < 1:
            raise ConfigError(f"grid_size must be >= 1, got {self.grid_size}")


@dataclass(frozen=True)
class FullConfig:
    model: ModelConfig
    schedule: ScaleSchedule
    run: RunConfig
    data: DataConfig


def scale_weights(scales: Sequence[int]) -> list[float]:
    """Per-scale loss weights: lambda_l = L_l^2 / sum_k(L_k^2) * K.

    The weights sum to K = len(scales), so finer scales (more tokens) are not
    drowned out by the per-scale position average in the loss.
    """
    scales = list(scales)
    if not scales:
        raise ConfigError("scale_weights requires a non-empty scale list")
    if any(s <= 0 for s in scales):
        raise ConfigError(f"scale_weights requires positive scales, got {scales}")
    total = sum(s * s for s in scales)
    k = len(scales)
    return [s * s / total * k for s in scales]


def scaled_model_config(
    depth: int,
    *,
    action_dim: int = 2,
    codebook_size: int = 8192,
    embed_dim: int = 64,
    ffn_dim: int | None = None,
) -> ModelConfig:
    """Fill (width, heads, dropout) from depth: w = 64d, h = d, dr = 0.1*d/24."""
    if depth <= 0:
        raise ConfigError(f"depth must be >= 1, got {depth}")
    width = 64 * depth
    return ModelConfig(
        depth=depth,
        width=width,
        heads=depth,
        dropout=0.1 * depth / 24,
        ffn_dim=4 * width if ffn_dim is None else ffn_dim,
        action_dim=action_dim,
        codebook_size=codebook_size,
        embed_dim=embed_dim,
    )


def desk_config() -> FullConfig:
    """Default desk-scale configuration: trainable on a CPU in minutes.

    Keeps the reference scale structure (latent_base 16, future scales
    [1..6], observed scales a strictly larger list) at a small model size.
    """
    return FullConfig(
        model=ModelConfig(),
        schedule=ScaleSchedule(),
        run=RunConfig(),
        data=DataConfig(),
    )


_SECTION_TYPES = {
    "model": ModelConfig,
    "schedule": ScaleSchedule,
    "run": RunConfig,
    "data": DataConfig,
}


def _build_section(name: str, cls, payload: dict):
    if not isinstance(payload, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {sorted(unknown)}")
    try:
        return cls(**payload)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def load_config(path: str | Path, *, seed: int | None = None) -> FullConfig:
    """Load and fully validate a config file; ``seed`` overrides the file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        sections[name] = _build_section(name, cls, raw.get(name, {}))
    if seed is not None:
        sections["run"] = dataclasses.replace(sections["run"], seed=int(seed))
    return FullConfig(
        model=sections["model"],
        schedule=sections["schedule"],
        run=sections["run"],
        data=sections["data"],
    )


def write_config(config: FullConfig, path: str | Path) -> None:
    """Write a config so that load_config round-trips it exactly."""
    payload = {
        "model": dataclasses.asdict(config.model),
        "schedule": dataclasses.asdict(config.schedule),
        "run": dataclasses.asdict(config.run),
        "data": dataclasses.asdict(config.data),
    }
    for sec in payload.values():
        for key, value in sec.items():
            if isinstance(value, tuple):
                sec[key] = list(value)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
