"""Action-conditioned generation: KV-cached, scale-parallel decoding with
top-k/top-p sampling, plus the best-of-N evaluation protocol.

A DecodeState owns one rollout: its cache, rng stream, and per-frame code
latents. The rng is consumed in block order (one batch of uniforms per
sampled block), so cached and cache-disabled decoding draw identically; the
cache-disabled path recomputes the prefix block-by-block from scratch with
the same op shapes, making the two paths produce identical tokens.
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
    Block,
    TokenStreamLayout,
    build_layout,
)
from scalewm.model import KVCache, WorldModel
from scalewm.tokenizer import (
    MultiScaleTokenizer,
    MultiScaleTokenMap,
    frames_to_float,
    resize_latent,
)

NEG_INF = float("-inf")


@dataclass(frozen=True)
class SamplingConfig:
    top_k: int = 100
    top_p: float = 1.0
    temperature: float = 1.0
    greedy: bool = False

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def _restricted_probs(logits: torch.Tensor, k: int, p: float, temperature: float):
    """(N, vocab) logits -> sorted keep-probabilities and their vocab indices."""
    if (logits == NEG_INF).all(dim=-1).any():
        raise ValueError("a logits row is entirely -inf (empty legal vocabulary)")
    x = logits.float() / temperature
    vals, idx = torch.sort(x, dim=-1, descending=True, stable=True)
    if k < vals.shape[-1]:
        vals = vals.masked_fill(
            torch.arange(vals.shape[-1], device=vals.device)[None, :] >= k, NEG_INF
        )
    probs = torch.softmax(vals, dim=-1)
    cum_before = torch.cumsum(probs, dim=-1) - probs
    probs = probs * (cum_before < p)
    probs = probs / probs.sum(dim=-1, keepdim=True)
    return probs, idx


def sample_topk_topp(
    logits_row: torch.Tensor,
    k: int,
    p: float,
    temperature: float,
    rng: torch.Generator,
) -> int:
    """Sample one token: keep the k highest logits (boundary ties to the lower
    index), then the smallest sorted prefix of cumulative probability >= p,
    renormalize, draw by inverse CDF."""
    cfg = SamplingConfig(top_k=k, top_p=p, temperature=temperature)
    return int(sample_block_tokens(logits_row[None, :], cfg, rng)[0])


def sample_block_tokens(
    logits: torch.Tensor, sampling: SamplingConfig, rng: torch.Generator | None
) -> torch.Tensor:
    """All rows of a block at once; one batched uniform draw in row order."""
    if sampling.greedy:
        return torch.argmax(logits, dim=-1)
    probs, idx = _restricted_probs(logits, sampling.top_k, sampling.top_p, sampling.temperature)
    u = torch.rand(logits.shape[0], 1, generator=rng, dtype=torch.float64)
    cdf = torch.cumsum(probs.double(), dim=-1)
    # First sorted slot whose cdf exceeds the uniform.
    choice = torch.searchsorted(cdf, u, right=False).clamp(max=probs.shape[-1] - 1)
    return idx.gather(-1, choice).squeeze(-1)


class DecodeState:
    """Cache, cursor, rng, and per-frame decode context for one rollout."""

    def __init__(
        self,
        model: WorldModel,
        tokenizer: MultiScaleTokenizer,
        layout: TokenStreamLayout,
        sampling: SamplingConfig,
        seed: int = 0,
        use_cache: bool = True,
        batch: int = 1,
    ):
        self.model = model
        self.tokenizer = tokenizer
        self.layout = layout
        self.sampling = sampling
        self.use_cache = use_cache
        self.batch = batch
        self.cache = KVCache(len(model.layers)) if use_cache else None
        self.generator = torch.Generator().manual_seed(seed)
        self.cursor = 0
        self.committed_inputs: list[torch.Tensor] = []
        self.frame_cums: dict[int, torch.Tensor] = {}
        self.start_contents: dict[int, torch.Tensor] = {}
        self.tokens: dict[int, torch.Tensor] = {}  # block index -> (B, L, L) local ids
        self.frame_rewards: dict[int, torch.Tensor] = {}
        self._first_scale_blocks = set()
        self._frame_last_block: dict[int, int] = {}
        seen = set()
        for b in layout.blocks:
            if b.kind in (KIND_SCALE, KIND_PROMPT) and b.frame not in seen:
                self._first_scale_blocks.add(b.index)
                seen.add(b.frame)
            self._frame_last_block[b.frame] = b.index

    # -- forward plumbing ---------------------------------------------------

    def _forward_block(self, inputs: torch.Tensor) -> torch.Tensor:
        """Hidden states for a new block; commits K/V when caching."""
        if self.use_cache:
            return self.model.forward_new(inputs, self.cache)
        # Full recompute: replay every committed block against a fresh cache
        # with identical per-block shapes, then run the new block.
        cache = KVCache(len(self.model.layers))
        for past in self.committed_inputs:
            self.model.forward_new(past, cache)
        return self.model.forward_new(inputs, cache)

    def _block_role_vocab(self, block: Block) -> tuple[int, int]:
        off = self.layout.vocab_offset(block.role)
        return off, off + self.layout.codebook_size

    def _inputs_for_block(self, block: Block) -> torch.Tensor:
        if block.kind in (KIND_START, KIND_SEP):
            return self.model.block_inputs(block, start_content=self.start_contents[block.frame])
        if block.index in self._first_scale_blocks:
            return self.model.block_inputs(block, start_content=self.start_contents[block.frame])
        cum = self.frame_cums[block.frame]
        cells = resize_latent(cum, block.scale, down=True)
        cells = cells.permute(0, 2, 3, 1).reshape(self.batch, block.size, -1)
        return self.model.block_inputs(block, code_cells=cells.to(self.model.head.weight.dtype))

    def _advance(self, block: Block, inputs: torch.Tensor, hidden: torch.Tensor) -> None:
        self.committed_inputs.append(inputs)
        self.cursor += 1
        if block.frame >= 1 and block.index == self._frame_last_block[block.frame]:
            self.frame_rewards[block.frame] = self.model.predict_reward(hidden[:, -1, :]).detach()

    def _accumulate_codes(self, block: Block, local_tokens: torch.Tensor) -> None:
        codebook = self.tokenizer.codebooks[block.role]
        emb = codebook.lookup(local_tokens).permute(0, 3, 1, 2)
        up = resize_latent(emb, self.tokenizer.schedule.latent_base, down=False)
        cum = self.frame_cums.get(block.frame)
        self.frame_cums[block.frame] = up if cum is None else cum + up

    # -- public stepping ------------------------------------------------------

    def begin_frame(self, frame: int, action: torch.Tensor) -> None:
        self.start_contents[frame] = self.model.start_content(
            action.to(self.model.head.weight.dtype)
        )

    def commit_block(self, block: Block, known_tokens: torch.Tensor | None = None) -> None:
        """Commit a block with teacher-provided content (context prefill)."""
        if block.index != self.cursor:
            raise ValueError(f"cursor at block {self.cursor}, got block {block.index}")
        if block.kind in (KIND_SCALE, KIND_PROMPT):
            if known_tokens is None:
                raise ValueError(f"block {block.index} ({block.kind}) needs tokens to commit")
            self.tokens[block.index] = known_tokens
        inputs = self._inputs_for_block(block)
        hidden = self._forward_block(inputs)
        if known_tokens is not None:
            self._accumulate_codes(block, known_tokens)
        self._advance(block, inputs, hidden)

    def decode_block(self, block: Block) -> torch.Tensor:
        """Sample every token of the block in one parallel step."""
        if block.index != self.cursor:
            raise ValueError(f"cursor at block {self.cursor}, got block {block.index}")
        if block.kind not in (KIND_SCALE, KIND_PROMPT):
            raise ValueError(f"cannot sample a {block.kind} block; use commit_block")
        inputs = self._inputs_for_block(block)
        hidden = self._forward_block(inputs)
        logits = self.model.head(hidden)
        lo, hi = self._block_role_vocab(block)
        legal = torch.full_like(logits, NEG_INF)
        legal[..., lo:hi] = logits[..., lo:hi]
        flat = legal.reshape(-1, legal.shape[-1])
        sampled = sample_block_tokens(flat, self.sampling, self.generator)
        local = (sampled - lo).reshape(self.batch, block.scale, block.scale)
        self.tokens[block.index] = local
        self._accumulate_codes(block, local)
        self._advance(block, inputs, hidden)
        return local


def decode_block(state: DecodeState, layout: TokenStreamLayout, block: Block) -> torch.Tensor:
    """Functional form of DecodeState.decode_block."""
    if layout is not state.layout:
        raise ValueError("layout does not match the decode state")
    return state.decode_block(block)


@dataclass
class RolloutResult:
    frames: np.ndarray  # (T - T0, H, W, 3) uint8
    rewards: np.ndarray  # (T - T0,)
    tokens: list[MultiScaleTokenMap]
    seed: int


@torch.no_grad()
def rollout(
    context_frames: np.ndarray,
    actions: np.ndarray,
    num_frames: int,
    model: WorldModel,
    tokenizer: MultiScaleTokenizer,
    sampling: SamplingConfig,
    prompt_image: np.ndarray | None = None,
    context_actions: np.ndarray | None = None,
    seed: int = 0,
    use_cache: bool = True,
) -> RolloutResult:
    """Generate T - T0 future frames and rewards from T0 context frames.

    ``actions[i]`` conditions generated frame T0 + 1 + i. ``context_actions``
    optionally carries the actions that led into context frames 2..T0 (zeros
    otherwise). The prompt, when given, is the rendered motion-prompt image.
    """
    t0 = context_frames.shape[0]
    actions = np.asarray(actions, dtype=np.float32)
    if actions.shape[0] != num_frames - t0:
        raise ValueError(
            f"need an action for each of the {num_frames - t0} generated frames, "
            f"got {actions.shape[0]}"
        )
    model.eval()
    tokenizer.eval()
    schedule = tokenizer.schedule
    layout = build_layout(
        schedule, num_frames, t0, with_prompt=prompt_image is not None,
        codebook_size=tokenizer.codebook_size,
    )
    state = DecodeState(model, tokenizer, layout, sampling, seed=seed, use_cache=use_cache)

    ctx = frames_to_float(context_frames)
    context = tokenizer.context_from_observed(ctx)
    obs_maps = [
        tokenizer.encode_multiscale(context_frames[t], "observed", frame_index=t + 1)
        for t in range(t0)
    ]
    prompt_map = None
    if prompt_image is not None:
        prompt_map = tokenizer.encode_multiscale(prompt_image, "observed", frame_index=0)

    zero = torch.zeros(1, model.config.action_dim)
    ctx_act = torch.zeros(t0 + 1, model.config.action_dim)
    if context_actions is not None:
        ca = torch.as_tensor(np.asarray(context_actions, dtype=np.float32))
        ctx_act[t0 + 1 - ca.shape[0] :] = ca

    for block in layout.blocks:
        if block.frame > t0:
            break
        if block.kind == KIND_START:
            if block.frame == 0:
                state.begin_frame(0, zero)
            else:
                state.begin_frame(block.frame, ctx_act[block.frame][None, :])
            state.commit_block(block)
        elif block.kind == KIND_SEP:
            state.commit_block(block)
        elif block.kind == KIND_PROMPT:
            state.commit_block(block, known_tokens=dict(prompt_map.maps)[block.scale][None])
        else:
            grid = dict(obs_maps[block.frame - 1].maps)[block.scale][None]
            state.commit_block(block, known_tokens=grid)

    out_frames = []
    out_rewards = []
    out_tokens = []
    for t in range(t0 + 1, num_frames + 1):
        act = torch.as_tensor(actions[t - t0 - 1])[None, :]
        for block in layout.blocks_for_frame(t):
            if block.kind == KIND_START:
                state.begin_frame(t, act)
                state.commit_block(block)
            else:
                state.decode_block(block)
        token_map = MultiScaleTokenMap(
            frame_index=t,
            role="future",
            maps=[
                (b.scale, state.tokens[b.index][0])
                for b in layout.blocks_for_frame(t)
                if b.kind == KIND_SCALE
            ],
            codebook_size=tokenizer.codebook_size,
        )
        out_tokens.append(token_map)
        out_frames.append(tokenizer.decode_multiscale(token_map).numpy())
        out_rewards.append(float(state.frame_rewards[t][0]))
    return RolloutResult(
        frames=np.stack(out_frames),
        rewards=np.asarray(out_rewards, dtype=np.float32),
        tokens=out_tokens,
        seed=seed,
    )


@dataclass
class BestOfNResult:
    best: RolloutResult
    best_index: int
    scores: list[float]


def best_of_n(
    context_frames: np.ndarray,
    actions: np.ndarray,
    ground_truth: np.ndarray,
    n: int,
    metric: str,
    model: WorldModel,
    tokenizer: MultiScaleTokenizer,
    sampling: SamplingConfig,
    base_seed: int = 0,
    **kwargs,
) -> BestOfNResult:
    """N independent seeded rollouts; the sample maximizing the metric against
    ground truth wins. Seeds are base_seed..base_seed + n - 1, so sample sets
    are nested across increasing n."""
    from scalewm import metrics as metrics_mod

    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if metric not in ("psnr", "ssim"):
        raise ValueError(f"metric must be 'psnr' or 'ssim', got {metric!r}")
    fn = metrics_mod.psnr if metric == "psnr" else metrics_mod.ssim
    num_frames = context_frames.shape[0] + ground_truth.shape[0]
    best = None
    best_score = -np.inf
    best_index = -1
    scores = []
    for i in range(n):
        result = rollout(
            context_frames,
            actions,
            num_frames,
            model,
            tokenizer,
            sampling,
            seed=base_seed + i,
            **kwargs,
        )
        score = float(fn(result.frames, ground_truth))
        scores.append(score)
        if score > best_score:
            best, best_score, best_index = result, score, i
    return BestOfNResult(best=best, best_index=best_index, scores=scores)
