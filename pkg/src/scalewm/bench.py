"""Scale-wise vs raster-scan decoding benchmark.

Both layouts decode with the same transformer weights and latent grid; the
scale-wise path produces a future frame in len(fut_scales) parallel steps,
the raster baseline in latent_base^2 single-token steps. Step counts come
from the layout (exact integers); wall-clock is the median over repetitions
after warmup runs.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import torch

from scalewm.layout import (
    KIND_SCALE,
    KIND_START,
    build_layout,
    build_raster_layout,
    sequential_steps_per_future_frame,
)
from scalewm.model import KVCache, WorldModel
from scalewm.rollout import DecodeState, SamplingConfig, sample_block_tokens
from scalewm.tokenizer import MultiScaleTokenizer

LAYOUT_KINDS = ("scalewise", "raster")


@dataclass
class BenchRow:
    layout_name: str
    steps_per_frame: int
    forwards_per_frame: int
    seconds_per_video: float
    tokens_per_s: float
    batch: int
    frames: int


def _decode_scalewise(
    model: WorldModel,
    tokenizer: MultiScaleTokenizer,
    batch: int,
    frames: int,
    greedy: bool,
    seed: int,
) -> float:
    schedule = tokenizer.schedule
    layout = build_layout(schedule, 1 + frames, 1, with_prompt=False, codebook_size=tokenizer.codebook_size)
    sampling = SamplingConfig(greedy=greedy)
    state = DecodeState(model, tokenizer, layout, sampling, seed=seed, batch=batch)
    gen = torch.Generator().manual_seed(seed)
    zero = torch.zeros(batch, model.config.action_dim)
    # Prefill the single context frame with random observed tokens (untimed).
    for block in layout.blocks_for_frame(1):
        if block.kind == KIND_START:
            state.begin_frame(1, zero)
            state.commit_block(block)
        else:
            grid = torch.randint(
                0, tokenizer.codebook_size, (batch, block.scale, block.scale), generator=gen
            )
            state.commit_block(block, known_tokens=grid)
    t0 = time.perf_counter()
    for t in range(2, frames + 2):
        state.begin_frame(t, zero)
        for block in layout.blocks_for_frame(t):
            if block.kind == KIND_START:
                state.commit_block(block)
            else:
                state.decode_block(block)
    return time.perf_counter() - t0


def _decode_raster(
    model: WorldModel,
    tokenizer: MultiScaleTokenizer,
    batch: int,
    frames: int,
    greedy: bool,
    seed: int,
) -> float:
    base = tokenizer.schedule.latent_base
    v = tokenizer.codebook_size
    sampling = SamplingConfig(greedy=greedy)
    gen = torch.Generator().manual_seed(seed)
    spatial = model._spatial(base)
    cache = KVCache(len(model.layers))
    dtype = model.head.weight.dtype
    zero = torch.zeros(batch, model.config.action_dim)

    def start_inputs(frame: int) -> torch.Tensor:
        return (model.start_content(zero) + model._temporal(frame))[:, None, :]

    def cell_inputs(frame: int, cell: int, prev_tokens: torch.Tensor) -> torch.Tensor:
        if cell == 0:
            x = model.seed_proj(model.start_content(zero))[:, None, :]
        else:
            x = model.token_embedding(prev_tokens)[:, None, :]
        x = x + model.scale_embedding.weight[base][None, None, :]
        x = x + spatial[cell][None, None, :]
        return (x + model._temporal(frame)[None, None, :]).to(dtype)

    # Prefill one context frame with random observed tokens (untimed).
    model.forward_new(start_inputs(1), cache)
    prev = None
    for cell in range(base * base):
        model.forward_new(cell_inputs(1, cell, prev), cache)
        prev = torch.randint(0, v, (batch,), generator=gen)
    t0 = time.perf_counter()
    for t in range(2, frames + 2):
        model.forward_new(start_inputs(t), cache)
        prev = None
        for cell in range(base * base):
            hidden = model.forward_new(cell_inputs(t, cell, prev), cache)
            logits = model.head(hidden)[:, -1, :]
            restricted = torch.full_like(logits, float("-inf"))
            restricted[:, v : 2 * v] = logits[:, v : 2 * v]
            prev = sample_block_tokens(restricted, sampling, gen)
    return time.perf_counter() - t0


@torch.no_grad()
def bench_decode(
    model: WorldModel,
    tokenizer: MultiScaleTokenizer,
    layout_kind: str,
    batch: int,
    frames: int,
    greedy: bool = True,
    repeats: int = 5,
    warmup: int = 2,
    seed: int = 0,
) -> BenchRow:
    """Time one layout's future-frame decoding; step counts are exact layout
    arithmetic, independent of the timing."""
    if layout_kind not in LAYOUT_KINDS:
        raise ValueError(f"layout_kind must be one of {LAYOUT_KINDS}, got {layout_kind!r}")
    model.eval()
    tokenizer.eval()
    schedule = tokenizer.schedule
    if layout_kind == "scalewise":
        layout = build_layout(schedule, 2, 1, with_prompt=False, codebook_size=tokenizer.codebook_size)
        steps = sequential_steps_per_future_frame(layout)
        tokens_per_frame = sum(s * s for s in schedule.fut_scales)
        run = _decode_scalewise
    else:
        layout = build_raster_layout(schedule.latent_base, 2, 1, tokenizer.codebook_size)
        steps = sequential_steps_per_future_frame(layout)
        tokens_per_frame = schedule.latent_base ** 2
        run = _decode_raster
    times = []
    for i in range(warmup + repeats):
        elapsed = run(model, tokenizer, batch, frames, greedy, seed + i)
        if i >= warmup:
            times.append(elapsed)
    median = statistics.median(times)
    return BenchRow(
        layout_name=layout_kind,
        steps_per_frame=steps,
        forwards_per_frame=steps + 1,
        seconds_per_video=median / batch,
        tokens_per_s=batch * frames * tokens_per_frame / median,
        batch=batch,
        frames=frames,
    )


def format_bench_table(rows: list[BenchRow]) -> str:
    header = (
        f"{'layout':<10} {'steps/frame':>12} {'forwards/frame':>15} "
        f"{'s/video':>10} {'tokens/s':>12}"
    )
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.layout_name:<10} {r.steps_per_frame:>12} {r.forwards_per_frame:>15} "
            f"{r.seconds_per_video:>10.4f} {r.tokens_per_s:>12.1f}"
        )
    if len(rows) == 2:
        ratio_steps = rows[1].steps_per_frame / rows[0].steps_per_frame
        ratio_time = rows[1].seconds_per_video / rows[0].seconds_per_video
        lines.append(
            f"step ratio (raster/scalewise): {ratio_steps:.2f}x; "
            f"wall-clock ratio: {ratio_time:.2f}x"
        )
    return "\n".join(lines)
