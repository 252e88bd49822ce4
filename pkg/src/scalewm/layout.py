"""Flattened token-stream layout, block-causal attention mask, and the fixed
positional embeddings.

A stream is an ordered list of blocks. Scale-wise layouts contain, per frame,
a start token followed by one block per spatial scale (observed frames use
the full scale list, future frames the sparse prefix); an optional motion
prompt branch (a pseudo-frame with index 0 over the observed scales, closed
by a separator token) precedes frame 1. The raster baseline layout replaces
each frame's scale blocks with latent_base^2 single-token blocks in row-major
order.

The unified vocabulary maps observed codebook indices to [0, V), future
indices to [V, 2V), and the start/separator specials to 2V and 2V + 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from scalewm.config import ScaleSchedule

KIND_START = "start"
KIND_PROMPT = "prompt"
KIND_SEP = "sep"
KIND_SCALE = "scale"

PROMPT_FRAME = 0


@dataclass(frozen=True)
class Block:
    """One decode unit: contiguous positions generated in a single step."""

    index: int
    kind: str
    frame: int
    scale: int | None
    size: int
    role: str
    offset: int

    @property
    def end(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class TokenStreamLayout:
    blocks: tuple[Block, ...]
    total_length: int
    codebook_size: int
    num_frames: int
    context_frames: int
    with_prompt: bool
    style: str = "scalewise"

    # -- vocabulary map ------------------------------------------------------

    @property
    def start_token(self) -> int:
        return 2 * self.codebook_size

    @property
    def sep_token(self) -> int:
        return 2 * self.codebook_size + 1

    @property
    def vocab_size(self) -> int:
        return 2 * self.codebook_size + 2

    def vocab_offset(self, role: str) -> int:
        if role == "observed":
            return 0
        if role == "future":
            return self.codebook_size
        raise ValueError(f"unknown role {role!r}")

    # -- derived index tensors -------------------------------------------------

    def block_ids(self) -> torch.Tensor:
        """Block index for every stream position."""
        ids = torch.empty(self.total_length, dtype=torch.long)
        for b in self.blocks:
            ids[b.offset : b.end] = b.index
        return ids

    def frame_final_positions(self) -> torch.Tensor:
        """Last stream position of each real frame (1..num_frames), for the
        reward head."""
        finals = {}
        for b in self.blocks:
            if b.frame >= 1:
                finals[b.frame] = b.end - 1
        return torch.tensor([finals[t] for t in range(1, self.num_frames + 1)], dtype=torch.long)

    def legal_vocab_mask(self) -> torch.Tensor:
        """(total_length, vocab_size) bool: True where a position may emit."""
        v = self.codebook_size
        mask = torch.zeros(self.total_length, self.vocab_size, dtype=torch.bool)
        for b in self.blocks:
            if b.kind in (KIND_START, KIND_SEP):
                mask[b.offset : b.end, 2 * v :] = True
            else:
                off = self.vocab_offset(b.role)
                mask[b.offset : b.end, off : off + v] = True
        return mask

    def future_frames(self) -> list[int]:
        return [t for t in range(self.context_frames + 1, self.num_frames + 1)]

    def blocks_for_frame(self, frame: int) -> list[Block]:
        return [b for b in self.blocks if b.frame == frame]


def build_layout(
    schedule: ScaleSchedule,
    num_frames: int,
    context_frames: int,
    with_prompt: bool,
    codebook_size: int,
) -> TokenStreamLayout:
    """Scale-wise stream: observed frames over obs_scales, future frames over
    fut_scales, optional prompt branch (frame 0) before frame 1."""
    if num_frames <= context_frames:
        raise ValueError(
            f"num_frames ({num_frames}) must exceed context_frames ({context_frames})"
        )
    blocks: list[Block] = []
    offset = 0

    def add(kind: str, frame: int, scale: int | None, size: int, role: str):
        nonlocal offset
        blocks.append(Block(len(blocks), kind, frame, scale, size, role, offset))
        offset += size

    if with_prompt:
        add(KIND_START, PROMPT_FRAME, None, 1, "observed")
        for s in schedule.obs_scales:
            add(KIND_PROMPT, PROMPT_FRAME, s, s * s, "observed")
        add(KIND_SEP, PROMPT_FRAME, None, 1, "observed")
    for t in range(1, num_frames + 1):
        role = "observed" if t <= context_frames else "future"
        add(KIND_START, t, None, 1, role)
        for s in schedule.scales_for_role(role):
            add(KIND_SCALE, t, s, s * s, role)
    return TokenStreamLayout(
        blocks=tuple(blocks),
        total_length=offset,
        codebook_size=codebook_size,
        num_frames=num_frames,
        context_frames=context_frames,
        with_prompt=with_prompt,
    )


def build_raster_layout(
    latent_base: int,
    num_frames: int,
    context_frames: int,
    codebook_size: int,
) -> TokenStreamLayout:
    """Baseline: one start token then latent_base^2 single-token blocks per
    frame, strictly causal token by token."""
    if num_frames <= context_frames:
        raise ValueError(
            f"num_frames ({num_frames}) must exceed context_frames ({context_frames})"
        )
    blocks: list[Block] = []
    offset = 0
    for t in range(1, num_frames + 1):
        role = "observed" if t <= context_frames else "future"
        blocks.append(Block(len(blocks), KIND_START, t, None, 1, role, offset))
        offset += 1
        for _ in range(latent_base * latent_base):
            blocks.append(Block(len(blocks), KIND_SCALE, t, latent_base, 1, role, offset))
            offset += 1
    return TokenStreamLayout(
        blocks=tuple(blocks),
        total_length=offset,
        codebook_size=codebook_size,
        num_frames=num_frames,
        context_frames=context_frames,
        with_prompt=False,
        style="raster",
    )


def block_causal_mask(layout: TokenStreamLayout) -> torch.Tensor:
    """(L, L) bool: query at row q may attend to key at column k iff k's block
    index is <= q's; bidirectional inside a block."""
    ids = layout.block_ids()
    return ids[None, :] <= ids[:, None]


def temporal_embedding(t: int, dim: int) -> torch.Tensor:
    """Fixed sine-cosine embedding of a frame index; pair j uses angular rate
    10000^(-2j/dim). Added to every token of frame t."""
    if dim % 2 != 0:
        raise ValueError(f"temporal embedding dim must be even, got {dim}")
    j = torch.arange(dim // 2, dtype=torch.float64)
    rate = torch.pow(torch.tensor(10000.0, dtype=torch.float64), -2.0 * j / dim)
    out = torch.empty(dim, dtype=torch.float64)
    out[0::2] = torch.sin(t * rate)
    out[1::2] = torch.cos(t * rate)
    return out.to(torch.float32)


def spatial_embedding_2d(scale: int, dim: int) -> torch.Tensor:
    """Fixed 2D sine-cosine embedding over the cells of an L x L block,
    row-major (scale^2, dim). Cell centers are normalized to [0, 1] so the
    encoding is consistent across scales."""
    if dim % 4 != 0:
        raise ValueError(f"spatial embedding dim must be divisible by 4, got {dim}")
    half = dim // 2
    j = torch.arange(half // 2, dtype=torch.float64)
    rate = torch.pow(torch.tensor(10000.0, dtype=torch.float64), -2.0 * j / half)
    centers = (torch.arange(scale, dtype=torch.float64) + 0.5) / scale
    out = torch.empty(scale, scale, dim, dtype=torch.float64)
    row = centers[:, None] * rate[None, :]  # scale x half/2
    col = centers[:, None] * rate[None, :]
    out[..., 0:half:2] = torch.sin(row)[:, None, :]
    out[..., 1:half:2] = torch.cos(row)[:, None, :]
    out[..., half::2] = torch.sin(col)[None, :, :]
    out[..., half + 1 :: 2] = torch.cos(col)[None, :, :]
    return out.reshape(scale * scale, dim).to(torch.float32)


def sequential_steps_per_future_frame(layout: TokenStreamLayout) -> int:
    """Token-producing decode steps per future frame (start commits excluded)."""
    future = layout.future_frames()
    if not future:
        return 0
    t = future[0]
    return sum(1 for b in layout.blocks_for_frame(t) if b.kind == KIND_SCALE)


def layout_table(layout: TokenStreamLayout) -> str:
    """Text table of blocks with offsets, for debugging and step accounting."""
    header = f"{'blk':>4} {'kind':<7} {'frame':>5} {'scale':>5} {'size':>5} {'offset':>7} {'role':<8}"
    lines = [header, "-" * len(header)]
    for b in layout.blocks:
        scale = "-" if b.scale is None else str(b.scale)
        lines.append(
            f"{b.index:>4} {b.kind:<7} {b.frame:>5} {scale:>5} {b.size:>5} {b.offset:>7} {b.role:<8}"
        )
    lines.append(f"total positions: {layout.total_length}")
    return "\n".join(lines)
