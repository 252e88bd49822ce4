"""Trajectory-aware motion prompts.

Tracked 2D points (from a tracker file or the synthetic environment's ground
truth) are filtered down to the dynamic subset, rendered as time-colored
polylines over the first observed frame, tokenized with the observed-role
tokenizer, and prepended to the stream behind a separator token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from scalewm.config import ScaleSchedule
from scalewm.layout import (
    KIND_PROMPT,
    KIND_SEP,
    KIND_START,
    Block,
    build_layout,
)

TRAJECTORY_COLOR_START = np.array([40.0, 60.0, 255.0])  # blue at t = 1
TRAJECTORY_COLOR_END = np.array([255.0, 40.0, 40.0])  # red at t = T


@dataclass(frozen=True)
class TrajectorySet:
    """Tracked points: (N, T, 2) pixel coordinates plus (N, T) confidence."""

    points: np.ndarray
    confidence: np.ndarray
    height: int
    width: int
    grid_size: int

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float32))
        object.__setattr__(self, "confidence", np.asarray(self.confidence, dtype=np.float32))
        if self.points.ndim != 3 or self.points.shape[-1] != 2:
            raise ValueError(f"points must be (N, T, 2), got {self.points.shape}")
        if self.confidence.shape != self.points.shape[:2]:
            raise ValueError(
                f"confidence shape {self.confidence.shape} does not match points "
                f"{self.points.shape[:2]}"
            )
        if self.confidence.size and (self.confidence.min() < 0 or self.confidence.max() > 1):
            raise ValueError("confidence entries must lie in [0, 1]")

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    @property
    def num_frames(self) -> int:
        return self.points.shape[1]


def sample_grid(height: int, width: int, grid_size: int) -> np.ndarray:
    """G^2 query points at the cell centers of a uniform G x G partition,
    row-major, as (x, y) pixel coordinates."""
    if grid_size < 1:
        raise ValueError(f"grid_size must be >= 1, got {grid_size}")
    if grid_size > min(height, width):
        raise ValueError(
            f"grid_size {grid_size} exceeds the smaller frame side {min(height, width)}"
        )
    xs = (np.arange(grid_size) + 0.5) * width / grid_size
    ys = (np.arange(grid_size) + 0.5) * height / grid_size
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1).astype(np.float32)


def windowed_displacements(points: np.ndarray, window: int) -> np.ndarray:
    """Euclidean displacement over a sliding window: (N, T - window)."""
    delta = points[:, window:, :] - points[:, :-window, :]
    return np.linalg.norm(delta, axis=-1)


def filter_trajectories(
    trajs: TrajectorySet,
    confidence_threshold: float,
    window: int = 4,
    ratio: float = 0.02,
) -> TrajectorySet:
    """Keep trajectories that are confidently tracked and actually move.

    A trajectory survives iff its mean confidence reaches the threshold AND
    its displacement over some ``window``-frame span reaches ``ratio`` of the
    image diagonal; points that stay below that displacement throughout the
    sequence are treated as static and dropped.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if trajs.num_frames <= window:
        raise ValueError(
            f"need more than window={window} frames to filter, got {trajs.num_frames} "
            f"(minimum sequence length is {window + 1})"
        )
    diag = float(np.hypot(trajs.height, trajs.width))
    moved = windowed_displacements(trajs.points, window).max(axis=1) >= ratio * diag
    confident = trajs.confidence.mean(axis=1) >= confidence_threshold
    keep = confident & moved
    return replace(trajs, points=trajs.points[keep], confidence=trajs.confidence[keep])


def _line_pixels(x0: int, y0: int, x1: int, y1: int):
    """Bresenham line; yields (x, y) including both endpoints."""
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        yield x, y
        if x == x1 and y == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy


def render_prompt(first_frame: np.ndarray, dynamic_trajs: TrajectorySet) -> np.ndarray:
    """Overlay filtered trajectories on the first frame as 1-px polylines
    whose color sweeps from blue (start) to red (end). Deterministic; an
    empty trajectory set returns the frame unchanged."""
    img = np.asarray(first_frame, dtype=np.uint8).copy()
    h, w = img.shape[:2]
    t_total = dynamic_trajs.num_frames
    for i in range(dynamic_trajs.num_points):
        pts = dynamic_trajs.points[i]
        for t in range(t_total - 1):
            frac = t / max(t_total - 2, 1)
            color = np.round(
                TRAJECTORY_COLOR_START + (TRAJECTORY_COLOR_END - TRAJECTORY_COLOR_START) * frac
            ).astype(np.uint8)
            x0, y0 = int(round(float(pts[t, 0]))), int(round(float(pts[t, 1])))
            x1, y1 = int(round(float(pts[t + 1, 0]))), int(round(float(pts[t + 1, 1])))
            for x, y in _line_pixels(x0, y0, x1, y1):
                if 0 <= x < w and 0 <= y < h:
                    img[y, x] = color
    return img


def prompt_dropout(p: float, rng: np.random.Generator) -> bool:
    """Training-time prompt omission: returns False with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p}")
    return bool(rng.random() >= p)


def replicate_frames(frames: list, required: int) -> list:
    """Uniformly replicate frames (in order) up to a required count; longer
    inputs pass through unchanged."""
    if not frames:
        raise ValueError("cannot replicate an empty frame list")
    if len(frames) >= required:
        return list(frames)
    repeats = -(-required // len(frames))  # ceil
    out = [f for f in frames for _ in range(repeats)]
    return out[:required]


@dataclass(frozen=True)
class DualBranchPrefix:
    """The stream prefix: prompt pseudo-frame blocks (when enabled), then the
    observed frames' blocks, with the token grid attached to each block."""

    blocks: tuple[Block, ...]
    tokens: tuple  # per block: None for start/sep, LongTensor grid otherwise
    with_prompt: bool

    @property
    def length(self) -> int:
        return sum(b.size for b in self.blocks)


def assemble_dual_branch(
    prompt_tokens,
    obs_tokens: list,
    use_prompt: bool,
    schedule: ScaleSchedule,
    codebook_size: int,
) -> DualBranchPrefix:
    """Build the context prefix: [prompt blocks][SEP][observed frames...] when
    the prompt is used, otherwise exactly the no-prompt prefix (no placeholder
    positions).

    The prompt must be tokenized with the observed-role tokenizer over the
    full observed scale list.
    """
    if use_prompt:
        if prompt_tokens is None:
            raise ValueError("use_prompt=True requires prompt tokens")
        if prompt_tokens.role != "observed":
            raise ValueError(
                f"motion prompt must be tokenized with the observed role, got "
                f"{prompt_tokens.role!r}"
            )
        if prompt_tokens.scales != schedule.obs_scales:
            raise ValueError(
                f"prompt scales {prompt_tokens.scales} do not match obs_scales "
                f"{schedule.obs_scales}"
            )
    for tok in obs_tokens:
        if tok.role != "observed":
            raise ValueError("context frames must be tokenized with the observed role")

    t0 = len(obs_tokens)
    layout = build_layout(schedule, t0 + 1, t0, with_prompt=use_prompt, codebook_size=codebook_size)
    blocks = tuple(b for b in layout.blocks if b.frame <= t0)
    tokens = []
    for b in blocks:
        if b.kind in (KIND_START, KIND_SEP):
            tokens.append(None)
        elif b.kind == KIND_PROMPT:
            tokens.append(dict(prompt_tokens.maps)[b.scale])
        else:
            tokens.append(dict(obs_tokens[b.frame - 1].maps)[b.scale])
    return DualBranchPrefix(blocks=blocks, tokens=tuple(tokens), with_prompt=use_prompt)


def save_trajectories(trajs: TrajectorySet, path: str | Path) -> None:
    """Write the trajectory container: manifest.json + points.bin + confidence.bin."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "N": trajs.num_points,
        "T": trajs.num_frames,
        "H": trajs.height,
        "W": trajs.width,
        "G": trajs.grid_size,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    trajs.points.astype("<f4").tofile(path / "points.bin")
    trajs.confidence.astype("<f4").tofile(path / "confidence.bin")


def load_trajectories(path: str | Path) -> TrajectorySet:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest.json in {path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    n, t = int(manifest["N"]), int(manifest["T"])
    points = np.fromfile(path / "points.bin", dtype="<f4")
    confidence = np.fromfile(path / "confidence.bin", dtype="<f4")
    if points.size != n * t * 2:
        raise ValueError(f"points.bin has {points.size} floats, manifest implies {n * t * 2}")
    if confidence.size != n * t:
        raise ValueError(f"confidence.bin has {confidence.size} floats, manifest implies {n * t}")
    return TrajectorySet(
        points=points.reshape(n, t, 2),
        confidence=confidence.reshape(n, t),
        height=int(manifest["H"]),
        width=int(manifest["W"]),
        grid_size=int(manifest["G"]),
    )


def trajectories_from_episode(record, grid_size: int | None = None) -> TrajectorySet:
    """Wrap an episode's ground-truth tracks as a TrajectorySet."""
    if record.trajectories is None:
        raise ValueError("episode record carries no ground-truth trajectories")
    h, w = record.frames.shape[1:3]
    return TrajectorySet(
        points=record.trajectories,
        confidence=record.confidences,
        height=h,
        width=w,
        grid_size=grid_size or int(round(record.trajectories.shape[0] ** 0.5)),
    )
