"""Teacher-forced stream assembly: token maps in, aligned targets and
next-scale input material out.

All tensors in a StreamBatch share one layout; the cumulative code latents
behind the scale inputs are built from the (frozen) tokenizer codebooks, so
the transformer inputs at a block are a deterministic function of strictly
earlier blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from scalewm.layout import (
    KIND_PROMPT,
    KIND_SCALE,
    KIND_SEP,
    KIND_START,
    TokenStreamLayout,
)
from scalewm.model import WorldModel
from scalewm.tokenizer import MultiScaleTokenizer, MultiScaleTokenMap, frames_to_float


@dataclass
class StreamBatch:
    layout: TokenStreamLayout
    targets: torch.Tensor  # (B, L) unified-vocab ids
    scale_cells: dict  # block index -> (B, size, embed_dim) coarser-scale context
    actions: torch.Tensor  # (B, num_frames + 1, action_dim); row f leads into frame f
    rewards: torch.Tensor | None  # (B, num_frames)


def tokenize_frames(
    tokenizer: MultiScaleTokenizer, frames, context_frames: int
) -> tuple[list[MultiScaleTokenMap], torch.Tensor]:
    """Tokenize one episode's frames: observed role for t <= T0, future role
    (with cross-attention context) afterwards. Returns per-frame maps and the
    observed context tensor."""
    x = frames_to_float(frames)
    context = tokenizer.context_from_observed(x[:context_frames])
    maps = []
    for t in range(x.shape[0]):
        role = "observed" if t < context_frames else "future"
        maps.append(
            tokenizer.encode_multiscale(
                x[t].permute(1, 2, 0),
                role,
                frame_index=t + 1,
                context=None if role == "observed" else context,
            )
        )
    return maps, context


def _stack_grids(maps: list[MultiScaleTokenMap], scale: int) -> torch.Tensor:
    return torch.stack([dict(m.maps)[scale] for m in maps], dim=0)


def build_stream_batch(
    tokenizer: MultiScaleTokenizer,
    layout: TokenStreamLayout,
    frame_maps: list[list[MultiScaleTokenMap]],
    actions: np.ndarray | torch.Tensor,
    rewards: np.ndarray | torch.Tensor | None = None,
    prompt_maps: list[MultiScaleTokenMap] | None = None,
) -> StreamBatch:
    """Assemble aligned targets and next-scale inputs for a batch of episodes.

    ``frame_maps[b][t]`` is the token map for frame t+1 of batch item b;
    ``actions[b, t]`` is the action taken at frame t+1 (so frame f's start
    token receives actions[:, f - 2]). ``prompt_maps[b]`` is required when
    the layout carries a prompt branch.
    """
    if layout.with_prompt and prompt_maps is None:
        raise ValueError("layout has a prompt branch but no prompt_maps were given")
    batch = len(frame_maps)
    num_frames = layout.num_frames
    targets = torch.empty(batch, layout.total_length, dtype=torch.long)
    scale_cells: dict[int, torch.Tensor] = {}

    with torch.no_grad():
        groups: list[tuple[int, list[MultiScaleTokenMap]]] = []
        if layout.with_prompt:
            groups.append((0, prompt_maps))
        for t in range(1, num_frames + 1):
            groups.append((t, [frame_maps[b][t - 1] for b in range(batch)]))

        for frame, maps in groups:
            role = maps[0].role
            blocks = [
                b
                for b in layout.blocks_for_frame(frame)
                if b.kind in (KIND_SCALE, KIND_PROMPT)
            ]
            offset = layout.vocab_offset(role)
            cum = None
            for pos, block in enumerate(blocks):
                grids = _stack_grids(maps, block.scale)
                targets[:, block.offset : block.end] = grids.reshape(batch, -1) + offset
                if pos > 0:
                    cells = tokenizer._resize(cum, block.scale, down=True)
                    scale_cells[block.index] = (
                        cells.permute(0, 2, 3, 1).reshape(batch, block.size, -1)
                    )
                emb = tokenizer.codebooks[role].lookup(grids).permute(0, 3, 1, 2)
                up = tokenizer._resize(emb, tokenizer.schedule.latent_base, down=False)
                cum = up if cum is None else cum + up

        for b in layout.blocks:
            if b.kind == KIND_START:
                targets[:, b.offset] = layout.start_token
            elif b.kind == KIND_SEP:
                targets[:, b.offset] = layout.sep_token

    action_dim = np.asarray(actions).shape[-1]
    act = torch.zeros(batch, num_frames + 1, action_dim)
    src = torch.as_tensor(np.asarray(actions), dtype=torch.float32)
    # Frame f's start receives the action taken at frame f-1 (stream index f-2).
    if num_frames >= 2:
        act[:, 2:, :] = src[:, : num_frames - 1, :]
    rew = None
    if rewards is not None:
        rew = torch.as_tensor(np.asarray(rewards), dtype=torch.float32)[:, :num_frames]
    return StreamBatch(layout=layout, targets=targets, scale_cells=scale_cells, actions=act, rewards=rew)


def build_model_inputs(
    model: WorldModel, stream: StreamBatch, zero_spatial: bool = False
) -> torch.Tensor:
    """(B, L, width) transformer inputs for a teacher-forced pass."""
    layout = stream.layout
    batch = stream.targets.shape[0]
    dtype = model.head.weight.dtype
    start_contents: dict[int, torch.Tensor] = {}
    pieces = []
    first_of_frame: set[int] = set()
    seen = set()
    for b in layout.blocks:
        if b.kind in (KIND_SCALE, KIND_PROMPT) and b.frame not in seen:
            first_of_frame.add(b.index)
            seen.add(b.frame)

    for b in layout.blocks:
        if b.frame not in start_contents:
            start_contents[b.frame] = model.start_content(
                stream.actions[:, b.frame, :].to(dtype)
            )
        sc = start_contents[b.frame]
        if b.kind in (KIND_START, KIND_SEP):
            pieces.append(model.block_inputs(b, start_content=sc, zero_spatial=zero_spatial))
        elif b.index in first_of_frame:
            pieces.append(model.block_inputs(b, start_content=sc, zero_spatial=zero_spatial))
        else:
            cells = stream.scale_cells[b.index].to(dtype)
            pieces.append(model.block_inputs(b, code_cells=cells, zero_spatial=zero_spatial))
    return torch.cat(pieces, dim=1)
