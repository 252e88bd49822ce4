"""Teacher-forced training: scale-weighted cross-entropy on future frames,
optional reward MSE, AdamW with warmup + cosine decay and global-norm
clipping. The tokenizer is trained first and frozen before the transformer.
"""

from __future__ import annotations

import csv
import math
import time

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from scalewm.config import FullConfig, RunConfig, ScaleSchedule, scale_weights
from scalewm.layout import KIND_SCALE, TokenStreamLayout, build_layout
from scalewm.model import WorldModel
from scalewm.motion import prompt_dropout
from scalewm.stream import StreamBatch, build_model_inputs, build_stream_batch, tokenize_frames
from scalewm.tokenizer import MultiScaleTokenizer, frames_to_float


def multiscale_ce_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    layout: TokenStreamLayout,
    schedule: ScaleSchedule,
    context_frames: int,
) -> torch.Tensor:
    """Scale-weighted cross-entropy over future-frame scale blocks only.

    L = sum_l lambda_l * mean_{t > T0} [ mean over the L_l^2 positions of
    -log p(target) ]. Observed frames, start/sep tokens, and the prompt
    branch contribute nothing (their logits are not even in the graph).
    """
    if logits.shape[1] != layout.total_length or targets.shape[1] != layout.total_length:
        raise ValueError("logits/targets are not aligned with the layout")
    future = layout.future_frames()
    weights = scale_weights(schedule.fut_scales)
    total = logits.new_zeros(())
    for idx, scale in enumerate(schedule.fut_scales):
        per_frame = []
        for t in future:
            blocks = [
                b
                for b in layout.blocks_for_frame(t)
                if b.kind == KIND_SCALE and b.scale == scale
            ]
            if len(blocks) != 1:
                raise ValueError(f"frame {t} has {len(blocks)} blocks at scale {scale}")
            b = blocks[0]
            block_logits = logits[:, b.offset : b.end, :]
            block_targets = targets[:, b.offset : b.end]
            logp = F.log_softmax(block_logits, dim=-1)
            nll = -logp.gather(-1, block_targets[..., None]).squeeze(-1)
            per_frame.append(nll.mean())
        total = total + weights[idx] * torch.stack(per_frame).mean()
    return total


def reward_loss(
    predicted: torch.Tensor, true: torch.Tensor, context_frames: int
) -> torch.Tensor:
    """MSE over future frames (t > T0)."""
    if predicted.shape != true.shape:
        raise ValueError(f"reward shapes disagree: {tuple(predicted.shape)} vs {tuple(true.shape)}")
    return F.mse_loss(predicted[:, context_frames:], true[:, context_frames:])


def lr_at_step(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup from 0 to peak, then cosine decay to 0 at ``total``."""
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if step >= total:
        return 0.0
    span = max(total - warmup, 1)
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


def make_optimizer(module: torch.nn.Module, lr: float, weight_decay: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(module.parameters(), lr=lr, betas=(0.9, 0.999), weight_decay=weight_decay)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def clip_gradients(module: torch.nn.Module, max_norm: float) -> float:
    return float(torch.nn.utils.clip_grad_norm_(module.parameters(), max_norm))


class MetricsWriter:
    """Append-only CSV of per-step training metrics."""

    FIELDS = ("step", "ce_loss", "reward_loss", "lr", "grad_norm", "tokens_per_s")

    def __init__(self, path: str | Path | None):
        self.path = None if path is None else Path(path)
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.FIELDS)

    def append(self, metrics: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([metrics.get(k, "") for k in self.FIELDS])


def train_step(
    model: WorldModel,
    batch: StreamBatch,
    optimizer: torch.optim.Optimizer,
    step: int,
    run: RunConfig,
    schedule: ScaleSchedule,
    reward_weight: float | None = None,
) -> dict:
    """One optimizer step on a prepared stream batch; returns metrics."""
    reward_weight = run.reward_loss_weight if reward_weight is None else reward_weight
    lr = lr_at_step(step, run.peak_lr, run.warmup_steps, run.total_steps)
    _set_lr(optimizer, lr)
    t0 = time.perf_counter()
    inputs = build_model_inputs(model, batch)
    out = model.forward_dense(inputs, batch.layout)
    ce = multiscale_ce_loss(out.logits, batch.targets, batch.layout, schedule, batch.layout.context_frames)
    rew = ce.new_zeros(())
    if batch.rewards is not None and reward_weight > 0:
        rew = reward_loss(out.rewards, batch.rewards.to(out.rewards.dtype), batch.layout.context_frames)
    loss = ce + reward_weight * rew
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss at step {step}: ce={float(ce.detach())}, "
            f"reward={float(rew.detach())}, lr={lr}"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grad_norm = clip_gradients(model, run.grad_clip)
    optimizer.step()
    elapsed = time.perf_counter() - t0
    tokens = batch.targets.numel()
    return {
        "step": step,
        "ce_loss": float(ce.detach()),
        "reward_loss": float(rew.detach()),
        "lr": lr,
        "grad_norm": grad_norm,
        "tokens_per_s": tokens / max(elapsed, 1e-9),
    }


def prepare_episode_batches(
    tokenizer: MultiScaleTokenizer,
    episodes: list,
    config: FullConfig,
    with_prompt_variant: bool = False,
    prompt_images: list | None = None,
) -> dict[bool, StreamBatch]:
    """Tokenize fixed episode segments once and build one stream batch per
    prompt setting (the tokenizer is frozen during transformer training)."""
    t0 = config.run.context_frames
    num_frames = config.run.sequence_length
    frame_maps = []
    actions = []
    rewards = []
    prompt_maps = []
    for i, ep in enumerate(episodes):
        maps, _ = tokenize_frames(tokenizer, ep.frames[:num_frames], t0)
        frame_maps.append(maps)
        actions.append(ep.actions[:num_frames])
        rewards.append(ep.rewards[:num_frames])
        if with_prompt_variant:
            img = prompt_images[i] if prompt_images is not None else ep.frames[0]
            prompt_maps.append(tokenizer.encode_multiscale(img, "observed", frame_index=0))
    actions = np.stack(actions)
    rewards = np.stack(rewards)
    v = tokenizer.codebook_size
    batches = {}
    plain = build_layout(config.schedule, num_frames, t0, with_prompt=False, codebook_size=v)
    batches[False] = build_stream_batch(tokenizer, plain, frame_maps, actions, rewards)
    if with_prompt_variant:
        prompted = build_layout(config.schedule, num_frames, t0, with_prompt=True, codebook_size=v)
        batches[True] = build_stream_batch(
            tokenizer, prompted, frame_maps, actions, rewards, prompt_maps=prompt_maps
        )
    return batches


def fit_world_model(
    model: WorldModel,
    tokenizer: MultiScaleTokenizer,
    episodes: list,
    config: FullConfig,
    steps: int,
    metrics_path: str | Path | None = None,
    use_prompts: bool = False,
    prompt_images: list | None = None,
    stop_below_ce: float | None = None,
    stop_when=None,
    log_every: int = 50,
) -> list[dict]:
    """Train the transformer on frozen-tokenizer streams.

    Prompt dropout is drawn per step before layout selection, per the training
    recipe; with ``use_prompts`` off every step uses the plain layout.
    """
    tokenizer.eval()
    batches = prepare_episode_batches(
        tokenizer, episodes, config, with_prompt_variant=use_prompts, prompt_images=prompt_images
    )
    optimizer = make_optimizer(model, config.run.peak_lr, config.run.weight_decay_transformer)
    writer = MetricsWriter(metrics_path)
    rng = np.random.default_rng(config.run.seed)
    history = []
    model.train()
    for step in range(steps):
        if use_prompts:
            use_prompt = prompt_dropout(config.run.prompt_dropout, rng)
        else:
            use_prompt = False
        metrics = train_step(model, batches[use_prompt], optimizer, step, config.run, config.schedule)
        writer.append(metrics)
        history.append(metrics)
        if log_every and step % log_every == 0:
            print(
                f"step {step:>5}  ce {metrics['ce_loss']:.4f}  reward {metrics['reward_loss']:.4f}"
                f"  lr {metrics['lr']:.2e}"
            )
        if stop_below_ce is not None and metrics["ce_loss"] < stop_below_ce:
            break
        if stop_when is not None and stop_when(metrics):
            break
    model.eval()
    return history


def train_tokenizer_epoch(
    tokenizer: MultiScaleTokenizer,
    episodes: list,
    optimizer: torch.optim.Optimizer,
    config: FullConfig,
    rng: np.random.Generator,
    steps: int | None = None,
    batch_frames: int = 8,
    start_step: int = 0,
    future_frames: int = 4,
) -> dict:
    """One pass over the dataset optimizing both role branches.

    Observed-branch batches are context frames; future-branch batches are
    sampled future frames encoded with cross-attention to their episode's
    context. Dead codewords are reset periodically.
    """
    t0 = config.run.context_frames
    order = rng.permutation(len(episodes))
    losses = []
    step = start_step
    tokenizer.train()
    for idx in order:
        ep = episodes[idx]
        tokenizer.begin_step(step)
        lr = lr_at_step(step, config.run.peak_lr, config.run.warmup_steps, config.run.total_steps)
        _set_lr(optimizer, lr)

        obs_raw = ep.frames[:t0]
        n_fut = min(future_frames, ep.frames.shape[0] - t0)
        fut_idx = t0 + rng.choice(ep.frames.shape[0] - t0, size=n_fut, replace=False)
        fut_raw = ep.frames[np.sort(fut_idx)]

        loss_obs, _ = tokenizer.tokenizer_loss(obs_raw, "observed")
        context = tokenizer.context_from_observed(frames_to_float(obs_raw)).expand(n_fut, -1, -1)
        loss_fut, _ = tokenizer.tokenizer_loss(fut_raw, "future", context=context)
        loss = loss_obs + loss_fut
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite tokenizer loss at step {step}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        clip_gradients(tokenizer, config.run.grad_clip)
        optimizer.step()
        losses.append(float(loss.detach()))
        if step > 0 and step % 500 == 0:
            tokenizer.reinit_dead_codes(step)
        step += 1
    tokenizer.eval()
    return {"mean_loss": float(np.mean(losses)), "last_loss": losses[-1], "steps": step}


def fit_tokenizer(
    tokenizer: MultiScaleTokenizer,
    episodes: list,
    config: FullConfig,
    epochs: int,
    seed: int | None = None,
    log_every: int = 1,
) -> list[dict]:
    optimizer = make_optimizer(
        tokenizer, config.run.peak_lr, config.run.weight_decay_tokenizer
    )
    rng = np.random.default_rng(config.run.seed if seed is None else seed)
    history = []
    step = 0
    for epoch in range(epochs):
        stats = train_tokenizer_epoch(
            tokenizer, episodes, optimizer, config, rng, start_step=step
        )
        step = stats["steps"]
        history.append(stats)
        if log_every and epoch % log_every == 0:
            print(f"tokenizer epoch {epoch:>3}  loss {stats['mean_loss']:.5f}")
    return history
