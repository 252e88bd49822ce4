"""Decoder-only transformer over the flattened token stream.

Inputs are next-scale context (the coarser scales already decoded), so the
logits at every position predict the token at that position. Attention is
block-causal: the canonical computation processes blocks sequentially against
a key/value cache, which makes block-prefix sufficiency hold exactly and is
the same code path used for incremental decoding. A dense masked pass with
identical semantics (up to float addition order) is used for training speed.

A single output head covers the unified vocabulary (observed and future
codebooks plus the start/separator specials); each position's logits are
masked to its legal sub-vocabulary with -inf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from scalewm.config import ModelConfig
from scalewm.layout import (
    KIND_PROMPT,
    KIND_SCALE,
    KIND_SEP,
    KIND_START,
    Block,
    TokenStreamLayout,
    block_causal_mask,
    spatial_embedding_2d,
    temporal_embedding,
)

NEG_INF = float("-inf")


class KVCache:
    """Per-layer key/value memory for committed stream positions."""

    def __init__(self, num_layers: int):
        self.keys: list[torch.Tensor | None] = [None] * num_layers
        self.values: list[torch.Tensor | None] = [None] * num_layers

    def extend(self, layer: int, k: torch.Tensor, v: torch.Tensor):
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            self.keys[layer] = torch.cat([self.keys[layer], k], dim=2)
            self.values[layer] = torch.cat([self.values[layer], v], dim=2)
        return self.keys[layer], self.values[layer]

    @property
    def length(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[2]


class _SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)
        self.drop = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        mask: torch.Tensor | None = None,
        cache: KVCache | None = None,
        layer: int = 0,
    ) -> torch.Tensor:
        b, n, w = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        if cache is not None:
            k, v = cache.extend(layer, k, v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask, NEG_INF)
        attn = self.drop(torch.softmax(scores, dim=-1))
        y = (attn @ v).transpose(1, 2).reshape(b, n, w)
        return self.out(y)


class _TransformerLayer(nn.Module):
    def __init__(self, width: int, heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = _SelfAttention(width, heads, dropout)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, ffn_dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(ffn_dim, width),
        )

    def forward(self, x, mask=None, cache=None, layer=0):
        x = x + self.attn(self.ln1(x), mask=mask, cache=cache, layer=layer)
        return x + self.mlp(self.ln2(x))


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # (B, L, vocab), -inf outside the legal sub-vocab
    hidden: torch.Tensor  # (B, L, width), after the final norm
    rewards: torch.Tensor  # (B, num_frames)


def inject_action(
    start_embedding: torch.Tensor, action: torch.Tensor, projection: nn.Linear
) -> torch.Tensor:
    """Add the linear action projection to a start-token embedding. The
    projection has no bias, so a zero action is exactly neutral."""
    if action.shape[-1] != projection.in_features:
        raise ValueError(
            f"action dim {action.shape[-1]} does not match projection "
            f"({projection.in_features})"
        )
    return start_embedding + projection(action)


class WorldModel(nn.Module):
    """Transformer over stream embeddings with token and reward heads."""

    def __init__(self, config: ModelConfig, codebook_size: int | None = None, max_scale: int = 16):
        super().__init__()
        self.config = config
        self.codebook_size = config.codebook_size if codebook_size is None else codebook_size
        self.vocab_size = 2 * self.codebook_size + 2
        self.max_scale = max_scale
        w = config.width
        self.token_embedding = nn.Embedding(self.vocab_size, w)
        self.action_proj = nn.Linear(config.action_dim, w, bias=False)
        self.seed_proj = nn.Linear(w, w)
        self.code_proj = nn.Linear(config.embed_dim, w)
        self.scale_embedding = nn.Embedding(max_scale + 1, w)
        self.layers = nn.ModuleList(
            [
                _TransformerLayer(w, config.heads, config.ffn_dim, config.dropout)
                for _ in range(config.depth)
            ]
        )
        self.final_norm = nn.LayerNorm(w)
        self.head = nn.Linear(w, self.vocab_size)
        self.reward_head = nn.Linear(w, 1)
        self._embed_cache: dict = {}

    # -- fixed embeddings, cached per (kind, key) ---------------------------

    def _temporal(self, frame: int) -> torch.Tensor:
        key = ("t", frame)
        if key not in self._embed_cache:
            self._embed_cache[key] = temporal_embedding(frame, self.config.width)
        return self._embed_cache[key].to(self.head.weight.dtype)

    def _spatial(self, scale: int) -> torch.Tensor:
        key = ("s", scale)
        if key not in self._embed_cache:
            self._embed_cache[key] = spatial_embedding_2d(scale, self.config.width)
        return self._embed_cache[key].to(self.head.weight.dtype)

    # -- block input construction -------------------------------------------

    def start_content(self, action: torch.Tensor) -> torch.Tensor:
        """Start-token content: learned start embedding plus projected action."""
        start = self.token_embedding.weight[2 * self.codebook_size]
        return inject_action(start[None, :].expand(action.shape[0], -1), action, self.action_proj)

    def block_inputs(
        self,
        block: Block,
        *,
        start_content: torch.Tensor | None = None,
        code_cells: torch.Tensor | None = None,
        prev_token_ids: torch.Tensor | None = None,
        zero_spatial: bool = False,
    ) -> torch.Tensor:
        """(B, block.size, width) transformer inputs for one block.

        First scale blocks of a frame seed from the frame's start content;
        later blocks project the coarser-scale code cells; raster blocks embed
        the previous token id.
        """
        if block.kind == KIND_START:
            x = start_content[:, None, :]
        elif block.kind == KIND_SEP:
            if start_content is None:
                raise ValueError("SEP block needs start_content for the batch size")
            sep = self.token_embedding.weight[2 * self.codebook_size + 1]
            x = sep[None, None, :].expand(start_content.shape[0], 1, -1)
        elif prev_token_ids is not None:
            x = self.token_embedding(prev_token_ids)
        elif code_cells is not None:
            x = self.code_proj(code_cells)
        elif start_content is not None:
            x = self.seed_proj(start_content)[:, None, :].expand(-1, block.size, -1)
        else:
            raise ValueError(f"no input source for block {block}")
        if block.kind in (KIND_SCALE, KIND_PROMPT):
            x = x + self.scale_embedding.weight[block.scale][None, None, :]
            if not zero_spatial and block.size == block.scale * block.scale:
                x = x + self._spatial(block.scale)[None, :, :]
        return x + self._temporal(block.frame)[None, None, :]

    # -- forward passes --------------------------------------------------------

    def _finish(self, h: torch.Tensor, layout: TokenStreamLayout) -> ForwardOutput:
        hidden = self.final_norm(h)
        logits = self.head(hidden)
        legal = layout.legal_vocab_mask().to(logits.device)
        logits = logits.masked_fill(~legal[None, :, :], NEG_INF)
        finals = layout.frame_final_positions()
        rewards = self.reward_head(hidden[:, finals, :]).squeeze(-1)
        return ForwardOutput(logits=logits, hidden=hidden, rewards=rewards)

    def forward_dense(self, inputs: torch.Tensor, layout: TokenStreamLayout) -> ForwardOutput:
        """One masked pass over the whole stream (training path)."""
        if inputs.shape[1] != layout.total_length:
            raise ValueError(
                f"inputs length {inputs.shape[1]} != layout length {layout.total_length}"
            )
        mask = block_causal_mask(layout).to(inputs.device)[None, None, :, :]
        h = inputs
        for layer in self.layers:
            h = layer(h, mask=mask)
        return self._finish(h, layout)

    def forward_new(self, inputs_new: torch.Tensor, cache: KVCache) -> torch.Tensor:
        """Run only new positions against the cache; commits their K/V.

        New positions attend to everything already committed plus each other,
        so no mask is materialized. Returns final-norm hidden states.
        """
        h = inputs_new
        for i, layer in enumerate(self.layers):
            h = layer(h, cache=cache, layer=i)
        return self.final_norm(h)

    def forward_blockwise(self, inputs: torch.Tensor, layout: TokenStreamLayout) -> ForwardOutput:
        """Sequential per-block computation against a fresh cache.

        This is the canonical semantics: block logits depend only on their
        block prefix, exactly. (forward_dense matches it up to float
        summation order.)
        """
        cache = KVCache(len(self.layers))
        pieces = []
        for b in layout.blocks:
            h = inputs[:, b.offset : b.end, :]
            for i, layer in enumerate(self.layers):
                h = layer(h, cache=cache, layer=i)
            pieces.append(self.final_norm(h))
        hidden = torch.cat(pieces, dim=1)
        logits = self.head(hidden)
        legal = layout.legal_vocab_mask().to(logits.device)
        logits = logits.masked_fill(~legal[None, :, :], NEG_INF)
        finals = layout.frame_final_positions()
        rewards = self.reward_head(hidden[:, finals, :]).squeeze(-1)
        return ForwardOutput(logits=logits, hidden=hidden, rewards=rewards)

    def forward(
        self, inputs: torch.Tensor, layout: TokenStreamLayout, mode: str = "dense"
    ) -> ForwardOutput:
        if mode == "dense":
            return self.forward_dense(inputs, layout)
        if mode == "blockwise":
            return self.forward_blockwise(inputs, layout)
        raise ValueError(f"unknown forward mode {mode!r}")

    def predict_reward(self, hidden_states: torch.Tensor) -> torch.Tensor:
        """Affine map from frame-final hidden states to scalar rewards."""
        return self.reward_head(hidden_states).squeeze(-1)
