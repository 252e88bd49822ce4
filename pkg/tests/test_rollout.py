import math

import numpy as np
import pytest
import torch

from scalewm.data import SpritesEnv, generate_episode
from scalewm.layout import KIND_SCALE, KIND_START, build_layout
from scalewm.model import WorldModel
from scalewm.rollout import (
    DecodeState,
    SamplingConfig,
    best_of_n,
    rollout,
    sample_block_tokens,
    sample_topk_topp,
)
from scalewm.tokenizer import MultiScaleTokenizer

from conftest import micro_model_config, micro_schedule


@pytest.fixture()
def micro_pair():
    torch.manual_seed(3)
    cfg = micro_model_config()
    tok = MultiScaleTokenizer(cfg, micro_schedule(), image_size=16, channels=(16, 32), groups=4).eval()
    model = WorldModel(cfg, max_scale=4).eval()
    return tok, model


def context_and_actions(t0=1, future=2):
    env = SpritesEnv(16, 1)
    ep = generate_episode(env, t0 + future, np.random.default_rng(5))
    return ep.frames[:t0], ep.actions[t0 - 1 : t0 - 1 + future], ep


class TestSampler:
    def test_k1_is_argmax(self):
        logits = torch.tensor([0.1, 3.0, 2.0, -1.0])
        for seed in range(5):
            g = torch.Generator().manual_seed(seed)
            assert sample_topk_topp(logits, 1, 1.0, 1.0, g) == 1

    def test_tiny_p_is_argmax(self):
        logits = torch.tensor([0.1, 3.0, 2.0, -1.0])
        for seed in range(5):
            g = torch.Generator().manual_seed(seed)
            assert sample_topk_topp(logits, 4, 1e-9, 1.0, g) == 1

    def test_categorical_frequencies(self):
        logits = torch.log(torch.tensor([0.5, 0.3, 0.2]))
        g = torch.Generator().manual_seed(0)
        draws = sample_block_tokens(
            logits[None, :].expand(30_000, -1), SamplingConfig(top_k=3, top_p=1.0), g
        )
        freq = torch.bincount(draws, minlength=3).float() / 30_000
        for i, p in enumerate([0.5, 0.3, 0.2]):
            assert abs(float(freq[i]) - p) < 0.02

    def test_topk_excludes_tail(self):
        logits = torch.log(torch.tensor([0.5, 0.3, 0.2]))
        g = torch.Generator().manual_seed(0)
        draws = sample_block_tokens(
            logits[None, :].expand(5_000, -1), SamplingConfig(top_k=2, top_p=1.0), g
        )
        assert int((draws == 2).sum()) == 0

    def test_topp_excludes_tail(self):
        logits = torch.log(torch.tensor([0.5, 0.3, 0.2]))
        g = torch.Generator().manual_seed(0)
        # Smallest prefix reaching p = 0.7: {0.5, 0.3}.
        draws = sample_block_tokens(
            logits[None, :].expand(5_000, -1), SamplingConfig(top_k=3, top_p=0.7), g
        )
        assert int((draws == 2).sum()) == 0
        assert int((draws == 1).sum()) > 0

    def test_boundary_tie_broken_by_lower_index(self):
        # Three logits tied at the k = 2 boundary: the two lowest indices win.
        logits = torch.tensor([2.0, 2.0, 2.0, 0.0])
        g = torch.Generator().manual_seed(0)
        draws = sample_block_tokens(
            logits[None, :].expand(2_000, -1), SamplingConfig(top_k=2, top_p=1.0), g
        )
        assert set(draws.unique().tolist()) == {0, 1}

    def test_all_neg_inf_rejected(self):
        g = torch.Generator().manual_seed(0)
        with pytest.raises(ValueError, match="-inf"):
            sample_topk_topp(torch.full((4,), float("-inf")), 2, 1.0, 1.0, g)

    def test_temperature_to_zero_is_greedy(self):
        logits = torch.tensor([0.5, 1.5, -0.2, 1.4])
        g = torch.Generator().manual_seed(0)
        for _ in range(20):
            assert sample_topk_topp(logits, 4, 1.0, 1e-7, g) == 1

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SamplingConfig(top_k=0)
        with pytest.raises(ValueError):
            SamplingConfig(top_p=0.0)
        with pytest.raises(ValueError):
            SamplingConfig(temperature=0.0)


class TestDecodeBlocks:
    def test_frame_completes_in_scale_count_decode_calls(self, micro_pair):
        tok, model = micro_pair
        ctx, actions, _ = context_and_actions()
        layout = build_layout(micro_schedule(), 2, 1, with_prompt=False, codebook_size=16)
        state = DecodeState(model, tok, layout, SamplingConfig(greedy=True), seed=0)
        with torch.no_grad():
            for block in layout.blocks_for_frame(1):
                if block.kind == KIND_START:
                    state.begin_frame(1, torch.zeros(1, 2))
                    state.commit_block(block)
                else:
                    state.commit_block(
                        block, known_tokens=torch.zeros(1, block.scale, block.scale, dtype=torch.long)
                    )
            decode_calls = 0
            state.begin_frame(2, torch.zeros(1, 2))
            for block in layout.blocks_for_frame(2):
                if block.kind == KIND_START:
                    state.commit_block(block)
                else:
                    grid = state.decode_block(block)
                    decode_calls += 1
        assert decode_calls == len(micro_schedule().fut_scales)

    def test_scale1_block_emits_one_token(self, micro_pair):
        tok, model = micro_pair
        ctx, actions, _ = context_and_actions()
        res = rollout(ctx, actions, 3, model, tok, SamplingConfig(greedy=True), seed=0)
        assert res.tokens[0].maps[0][1].shape == (1, 1)

    def test_cursor_enforced(self, micro_pair):
        tok, model = micro_pair
        layout = build_layout(micro_schedule(), 2, 1, with_prompt=False, codebook_size=16)
        state = DecodeState(model, tok, layout, SamplingConfig(greedy=True), seed=0)
        with pytest.raises(ValueError, match="cursor"):
            state.decode_block(layout.blocks[3])


class TestRollout:
    def test_greedy_deterministic(self, micro_pair):
        tok, model = micro_pair
        ctx, actions, _ = context_and_actions()
        a = rollout(ctx, actions, 3, model, tok, SamplingConfig(greedy=True), seed=0)
        b = rollout(ctx, actions, 3, model, tok, SamplingConfig(greedy=True), seed=0)
        assert np.array_equal(a.frames, b.frames)
        assert np.array_equal(a.rewards, b.rewards)

    @pytest.mark.parametrize("greedy", [True, False])
    def test_cache_equals_no_cache(self, micro_pair, greedy):
        tok, model = micro_pair
        ctx, actions, _ = context_and_actions()
        cfg = SamplingConfig(top_k=5, top_p=0.9, greedy=greedy)
        cached = rollout(ctx, actions, 3, model, tok, cfg, seed=11, use_cache=True)
        uncached = rollout(ctx, actions, 3, model, tok, cfg, seed=11, use_cache=False)
        for m1, m2 in zip(cached.tokens, uncached.tokens):
            for (s1, g1), (s2, g2) in zip(m1.maps, m2.maps):
                assert s1 == s2 and torch.equal(g1, g2)
        assert np.array_equal(cached.frames, uncached.frames)

    def test_missing_actions_rejected(self, micro_pair):
        tok, model = micro_pair
        ctx, actions, _ = context_and_actions()
        with pytest.raises(ValueError, match="action"):
            rollout(ctx, actions[:1], 3, model, tok, SamplingConfig(greedy=True))

    def test_output_shapes(self, micro_pair):
        tok, model = micro_pair
        ctx, actions, _ = context_and_actions(t0=1, future=2)
        res = rollout(ctx, actions, 3, model, tok, SamplingConfig(greedy=True), seed=0)
        assert res.frames.shape == (2, 16, 16, 3)
        assert res.rewards.shape == (2,)
        assert res.frames.dtype == np.uint8

    def test_prompt_changes_stream_not_shapes(self, micro_pair):
        tok, model = micro_pair
        ctx, actions, ep = context_and_actions()
        prompt = ep.frames[0]
        res = rollout(
            ctx, actions, 3, model, tok, SamplingConfig(greedy=True), prompt_image=prompt, seed=0
        )
        assert res.frames.shape == (2, 16, 16, 3)


class TestBestOfN:
    def test_n1_identical_to_single_rollout(self, micro_pair):
        tok, model = micro_pair
        ctx, actions, ep = context_and_actions()
        gt = ep.frames[1:3]
        cfg = SamplingConfig(top_k=5, top_p=0.9)
        res = best_of_n(ctx, actions, gt, 1, "psnr", model, tok, cfg, base_seed=3)
        single = rollout(ctx, actions, 3, model, tok, cfg, seed=3)
        assert np.array_equal(res.best.frames, single.frames)
        assert res.best_index == 0

    def test_nested_monotone_in_n(self, micro_pair):
        tok, model = micro_pair
        ctx, actions, ep = context_and_actions()
        gt = ep.frames[1:3]
        cfg = SamplingConfig(top_k=5, top_p=0.9)
        bests = [
            max(best_of_n(ctx, actions, gt, n, "psnr", model, tok, cfg, base_seed=0).scores)
            for n in (1, 2, 4, 6)
        ]
        assert bests == sorted(bests)

    def test_ssim_metric_supported(self, micro_pair):
        tok, model = micro_pair
        ctx, actions, ep = context_and_actions()
        gt = ep.frames[1:3]
        res = best_of_n(ctx, actions, gt, 2, "ssim", model, tok, SamplingConfig(top_k=5), base_seed=0)
        assert len(res.scores) == 2

    def test_bad_metric_rejected(self, micro_pair):
        tok, model = micro_pair
        ctx, actions, ep = context_and_actions()
        with pytest.raises(ValueError, match="metric"):
            best_of_n(ctx, actions, ep.frames[1:3], 2, "fvd", model, tok, SamplingConfig())
