"""Synthetic sprites environment, episode preprocessing, and the on-disk
episode container.

The sprites world is a desk-scale stand-in for robot data: an agent moves on
the unit square, can pick up objects, and is rewarded for getting an object
to the goal. Frames are rendered with soft (anti-aliased) edges so a small
tokenizer can reconstruct them well.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

AGENT_STEP = 0.05
PICKUP_RADIUS = 0.08

# Fixed palette; object colors cycle.
_BG = np.array([28.0, 28.0, 36.0])
_AGENT_COLOR = np.array([70.0, 150.0, 245.0])
_GOAL_COLOR = np.array([60.0, 200.0, 90.0])
_OBJECT_COLORS = [
    np.array([240.0, 90.0, 70.0]),
    np.array([245.0, 200.0, 60.0]),
    np.array([200.0, 90.0, 230.0]),
]


@dataclass(frozen=True)
class SpritesState:
    """Positions on the unit square plus carried flags, one per object."""

    agent: np.ndarray
    objects: np.ndarray
    goal: np.ndarray
    carried: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "agent", np.clip(np.asarray(self.agent, dtype=np.float64), 0.0, 1.0))
        object.__setattr__(self, "objects", np.clip(np.asarray(self.objects, dtype=np.float64), 0.0, 1.0))
        object.__setattr__(self, "goal", np.clip(np.asarray(self.goal, dtype=np.float64), 0.0, 1.0))
        object.__setattr__(self, "carried", np.asarray(self.carried, dtype=bool))


@dataclass
class StepResult:
    state: SpritesState
    reward: float
    frame: np.ndarray
    action_clamped: bool


@dataclass
class EpisodeRecord:
    """Frames + actions + rewards (+ optional tracked points) for one episode."""

    frames: np.ndarray  # T x H x W x 3 uint8
    actions: np.ndarray  # T x action_dim float32
    rewards: np.ndarray  # T float32
    trajectories: "np.ndarray | None" = None  # N x T x 2 float32
    confidences: "np.ndarray | None" = None  # N x T float32
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        t = self.frames.shape[0]
        if self.actions.shape[0] != t or self.rewards.shape[0] != t:
            raise ValueError(
                f"stream lengths disagree: frames {t}, actions {self.actions.shape[0]}, "
                f"rewards {self.rewards.shape[0]}"
            )
        if (self.trajectories is None) != (self.confidences is None):
            raise ValueError("trajectories and confidences must be provided together")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


def _soft_disk(dist: np.ndarray, radius: float) -> np.ndarray:
    # 1 inside, 0 outside, ~1.5px linear falloff for smooth edges.
    return np.clip((radius - dist) / 1.5 + 0.5, 0.0, 1.0)


class SpritesEnv:
    """Deterministic pick-and-place toy world rendered at ``image_size``."""

    def __init__(self, image_size: int = 64, num_objects: int = 1):
        self.image_size = image_size
        self.num_objects = num_objects
        ax = np.arange(image_size) + 0.5
        self._px, self._py = np.meshgrid(ax, ax, indexing="xy")
        self.clamp_events = 0

    def reset(self, rng: np.random.Generator) -> SpritesState:
        return SpritesState(
            agent=rng.uniform(0.15, 0.85, size=2),
            objects=rng.uniform(0.15, 0.85, size=(self.num_objects, 2)),
            goal=rng.uniform(0.15, 0.85, size=2),
            carried=np.zeros(self.num_objects, dtype=bool),
        )

    def reward(self, state: SpritesState) -> float:
        dists = np.linalg.norm(state.objects - state.goal[None, :], axis=1)
        return float(-dists.min())

    def step(self, state: SpritesState, action: np.ndarray) -> StepResult:
        action = np.asarray(action, dtype=np.float64)
        clamped = bool(np.any(np.abs(action) > 1.0))
        if clamped:
            self.clamp_events += 1
            action = np.clip(action, -1.0, 1.0)
        agent = np.clip(state.agent + AGENT_STEP * action, 0.0, 1.0)
        objects = state.objects.copy()
        carried = state.carried.copy()
        # Carried objects track the agent; a free object within reach is
        # grabbed (closest first, one object per step).
        objects[carried] = agent
        free = ~carried
        if free.any():
            dists = np.linalg.norm(objects - agent[None, :], axis=1)
            dists[carried] = np.inf
            j = int(np.argmin(dists))
            if dists[j] <= PICKUP_RADIUS:
                carried[j] = True
                objects[j] = agent
        nxt = SpritesState(agent=agent, objects=objects, goal=state.goal, carried=carried)
        return StepResult(nxt, self.reward(nxt), self.render(nxt), clamped)

    def render(self, state: SpritesState) -> np.ndarray:
        s = self.image_size
        img = np.tile(_BG, (s, s, 1))

        def paint(center, radius, color):
            cx, cy = center[0] * s, center[1] * s
            dist = np.sqrt((self._px - cx) ** 2 + (self._py - cy) ** 2)
            alpha = _soft_disk(dist, radius)[..., None]
            return img * (1 - alpha) + color[None, None, :] * alpha

        img = paint(state.goal, 0.09 * s, _GOAL_COLOR)
        for i in range(self.num_objects):
            img = paint(state.objects[i], 0.055 * s, _OBJECT_COLORS[i % len(_OBJECT_COLORS)])
        img = paint(state.agent, 0.07 * s, _AGENT_COLOR)
        return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _scripted_action(state: SpritesState, rng: np.random.Generator) -> np.ndarray:
    # Noisy go-to-object-then-goal policy: produces pickup events and
    # near-goal frames without any learning.
    if state.carried.any():
        target = state.goal
    else:
        dists = np.linalg.norm(state.objects - state.agent[None, :], axis=1)
        target = state.objects[int(np.argmin(dists))]
    direction = target - state.agent
    norm = np.linalg.norm(direction)
    if norm > 1e-8:
        direction = direction / norm * min(norm * 18.0, 0.9)
    action = direction + rng.normal(0.0, 0.25, size=2)
    return np.clip(action, -1.0, 1.0)


def generate_episode(
    env: SpritesEnv,
    length: int,
    rng: np.random.Generator,
    with_trajectories: bool = True,
) -> EpisodeRecord:
    """Roll the scripted policy for ``length`` frames.

    ``actions[t]`` is the action taken at frame t (producing frame t+1); the
    last action is a zero placeholder. Ground-truth trajectories track agent
    and object centers with confidence 1.0, so the motion-prompt pipeline can
    run without an external point tracker.
    """
    state = env.reset(rng)
    frames = [env.render(state)]
    rewards = [env.reward(state)]
    actions = []
    centers = [np.concatenate([state.agent[None, :], state.objects], axis=0)]
    for _ in range(length - 1):
        action = _scripted_action(state, rng)
        result = env.step(state, action)
        state = result.state
        frames.append(result.frame)
        rewards.append(result.reward)
        actions.append(action)
        centers.append(np.concatenate([state.agent[None, :], state.objects], axis=0))
    actions.append(np.zeros(2))

    record = EpisodeRecord(
        frames=np.stack(frames),
        actions=np.stack(actions).astype(np.float32),
        rewards=np.asarray(rewards, dtype=np.float32),
        metadata={"env": "sprites", "image_size": env.image_size, "num_objects": env.num_objects},
    )
    if with_trajectories:
        pts = np.stack(centers, axis=1)  # (1 + M) x T x 2 in unit coords
        record.trajectories = (pts * env.image_size).astype(np.float32)
        record.confidences = np.ones(pts.shape[:2], dtype=np.float32)
    return record


@dataclass
class Session:
    """A raw recording: 30 fps streams plus per-frame segment ids."""

    frames: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    segment_ids: np.ndarray

    def __post_init__(self):
        t = self.frames.shape[0]
        if not (self.actions.shape[0] == self.rewards.shape[0] == self.segment_ids.shape[0] == t):
            raise ValueError("session streams must share the leading length")
        if t == 0:
            raise ValueError("empty session")


def _contiguous_runs(ids: np.ndarray) -> list[tuple[int, int]]:
    bounds = [0] + list(np.flatnonzero(np.diff(ids)) + 1) + [len(ids)]
    return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def preprocess_session(
    session: Session,
    f_target: int,
    t_min: int = 51,
    t_clip: int = 30,
    min_clip: int = 15,
    stride: int | None = None,
    source_fps: int = 30,
) -> list[EpisodeRecord]:
    """Downsample, segment, and window a session into episode records.

    Streams are first downsampled by floor(source_fps / f_target); contiguous
    runs of one segment id shorter than ``t_min`` are skipped; surviving
    segments are cut into windows of ``t_clip`` (stride defaults to t_clip,
    i.e. non-overlapping) and windows shorter than ``min_clip`` are dropped.
    """
    if f_target <= 0 or f_target > source_fps:
        raise ValueError(f"f_target must be in [1, {source_fps}], got {f_target}")
    df = source_fps // f_target
    if stride is None:
        stride = t_clip
    if stride <= 0 or t_clip <= 0 or min_clip <= 0:
        raise ValueError("t_clip, min_clip, and stride must be positive")

    frames = session.frames[::df]
    actions = session.actions[::df]
    rewards = session.rewards[::df]
    ids = session.segment_ids[::df]

    records = []
    for lo, hi in _contiguous_runs(ids):
        if hi - lo < t_min:
            continue
        for start in range(0, hi - lo, stride):
            stop = min(start + t_clip, hi - lo)
            if stop - start < min_clip:
                continue
            records.append(
                EpisodeRecord(
                    frames=frames[lo + start : lo + stop].copy(),
                    actions=actions[lo + start : lo + stop].copy(),
                    rewards=rewards[lo + start : lo + stop].copy(),
                    metadata={"segment_id": int(ids[lo]), "fps": f_target},
                )
            )
    return records


def sample_training_segment(
    record: EpisodeRecord,
    sequence_length: int,
    step_size: int,
    rng: np.random.Generator,
) -> EpisodeRecord | None:
    """Uniformly sample a strided sub-episode; None if the record is too short."""
    span = (sequence_length - 1) * step_size
    if span >= record.length:
        return None
    start = int(rng.integers(0, record.length - span))
    idx = start + step_size * np.arange(sequence_length)
    return EpisodeRecord(
        frames=record.frames[idx],
        actions=record.actions[idx],
        rewards=record.rewards[idx],
        trajectories=None if record.trajectories is None else record.trajectories[:, idx],
        confidences=None if record.confidences is None else record.confidences[:, idx],
        metadata=dict(record.metadata, segment_start=start, step_size=step_size),
    )


_STREAMS = {
    "frames": ("frames.bin", np.uint8),
    "actions": ("actions.bin", np.float32),
    "rewards": ("rewards.bin", np.float32),
    "trajectories": ("trajectories.bin", np.float32),
    "confidences": ("confidences.bin", np.float32),
}


def write_episode(record: EpisodeRecord, path: str | Path) -> None:
    """Write the episode container atomically (temp dir + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"metadata": record.metadata, "streams": {}}
    arrays = {}
    for name in _STREAMS:
        arr = getattr(record, name)
        if arr is None:
            continue
        fname, dtype = _STREAMS[name]
        arr = np.ascontiguousarray(arr, dtype=dtype)
        arrays[fname] = arr
        manifest["streams"][name] = {
            "file": fname,
            "shape": list(arr.shape),
            "dtype": np.dtype(dtype).name,
        }
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=".ep-tmp-"))
    try:
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        for fname, arr in arrays.items():
            # Little-endian on all supported platforms.
            arr.astype(arr.dtype.newbyteorder("<")).tofile(tmp / fname)
        if path.exists():
            raise FileExistsError(f"refusing to overwrite existing episode at {path}")
        os.rename(tmp, path)
    finally:
        if tmp.exists():
            import shutil

            shutil.rmtree(tmp, ignore_errors=True)


class EpisodeFormatError(ValueError):
    """Raised for corrupt or inconsistent episode containers."""


def write_session(session: Session, path: str | Path) -> None:
    """Raw-session container: like an episode plus a segment-id stream."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "session",
        "T": int(session.frames.shape[0]),
        "frame_shape": list(session.frames.shape[1:]),
        "action_dim": int(session.actions.shape[1]),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    session.frames.astype(np.uint8).tofile(path / "frames.bin")
    session.actions.astype("<f4").tofile(path / "actions.bin")
    session.rewards.astype("<f4").tofile(path / "rewards.bin")
    session.segment_ids.astype("<i4").tofile(path / "segments.bin")


def read_session(path: str | Path) -> Session:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise EpisodeFormatError(f"missing manifest.json in {path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("kind") != "session":
        raise EpisodeFormatError(f"{path} is not a session container")
    t = int(manifest["T"])
    fshape = [t] + list(manifest["frame_shape"])
    frames = np.fromfile(path / "frames.bin", dtype=np.uint8)
    if frames.size != int(np.prod(fshape)):
        raise EpisodeFormatError(f"frames.bin size mismatch in {path}")
    return Session(
        frames=frames.reshape(fshape),
        actions=np.fromfile(path / "actions.bin", dtype="<f4").reshape(t, manifest["action_dim"]).astype(np.float32),
        rewards=np.fromfile(path / "rewards.bin", dtype="<f4").astype(np.float32),
        segment_ids=np.fromfile(path / "segments.bin", dtype="<i4").astype(np.int64),
    )


def generate_session(
    env: SpritesEnv,
    rng: np.random.Generator,
    num_segments: int = 3,
    min_len: int = 40,
    max_len: int = 140,
) -> Session:
    """Concatenate scripted episodes into one 30 fps session with segment ids."""
    frames, actions, rewards, ids = [], [], [], []
    for seg in range(num_segments):
        length = int(rng.integers(min_len, max_len + 1))
        ep = generate_episode(env, length, rng, with_trajectories=False)
        frames.append(ep.frames)
        actions.append(ep.actions)
        rewards.append(ep.rewards)
        ids.append(np.full(length, seg, dtype=np.int64))
    return Session(
        frames=np.concatenate(frames),
        actions=np.concatenate(actions),
        rewards=np.concatenate(rewards),
        segment_ids=np.concatenate(ids),
    )


def read_episode(path: str | Path) -> EpisodeRecord:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise EpisodeFormatError(f"missing manifest.json in {path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise EpisodeFormatError(f"corrupt manifest in {path}: {exc}") from exc
    streams = manifest.get("streams", {})
    for required in ("frames", "actions", "rewards"):
        if required not in streams:
            raise EpisodeFormatError(f"episode {path} is missing required stream {required!r}")
    arrays = {}
    for name, info in streams.items():
        if name not in _STREAMS:
            raise EpisodeFormatError(f"unknown stream {name!r} in {path}")
        fpath = path / info["file"]
        if not fpath.exists():
            raise EpisodeFormatError(f"stream file missing for {name!r}: {fpath}")
        dtype = np.dtype(info["dtype"]).newbyteorder("<")
        data = np.fromfile(fpath, dtype=dtype)
        expected = int(np.prod(info["shape"]))
        if data.size != expected:
            raise EpisodeFormatError(
                f"stream {name!r} in {path} has {data.size} elements, manifest says {expected}"
            )
        arrays[name] = data.astype(dtype.newbyteorder("=")).reshape(info["shape"])
    lengths = {arrays["frames"].shape[0], arrays["actions"].shape[0], arrays["rewards"].shape[0]}
    if len(lengths) != 1:
        raise EpisodeFormatError(f"stream lengths disagree in {path}")
    return EpisodeRecord(
        frames=arrays["frames"],
        actions=arrays["actions"],
        rewards=arrays["rewards"],
        trajectories=arrays.get("trajectories"),
        confidences=arrays.get("confidences"),
        metadata=manifest.get("metadata", {}),
    )
