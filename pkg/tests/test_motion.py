import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from scalewm.config import ScaleSchedule
from scalewm.layout import KIND_PROMPT, KIND_SEP, KIND_START, build_layout
from scalewm.motion import (
    TrajectorySet,
    assemble_dual_branch,
    filter_trajectories,
    load_trajectories,
    prompt_dropout,
    render_prompt,
    replicate_frames,
    sample_grid,
    save_trajectories,
    windowed_displacements,
)
from scalewm.tokenizer import MultiScaleTokenMap


def make_trajs(points, confidence=None, h=64, w=64, g=4):
    points = np.asarray(points, dtype=np.float32)
    if confidence is None:
        confidence = np.ones(points.shape[:2], dtype=np.float32)
    return TrajectorySet(points=points, confidence=confidence, height=h, width=w, grid_size=g)


def straight_line(start, velocity, t):
    start = np.asarray(start, float)
    velocity = np.asarray(velocity, float)
    return np.stack([start + velocity * i for i in range(t)])


class TestSampleGrid:
    def test_low_res_grid(self):
        pts = sample_grid(64, 64, 12)
        assert pts.shape == (144, 2)

    def test_high_res_grid(self):
        assert sample_grid(256, 256, 16).shape == (256, 2)

    def test_single_point_at_center(self):
        pts = sample_grid(64, 64, 1)
        assert pts.shape == (1, 2)
        assert pts[0] == pytest.approx([32.0, 32.0])

    def test_cell_centers(self):
        pts = sample_grid(8, 8, 2)
        assert sorted(map(tuple, pts.tolist())) == [(2, 2), (2, 6), (6, 2), (6, 6)]

    def test_grid_too_large(self):
        with pytest.raises(ValueError):
            sample_grid(8, 8, 9)


class TestFilterTrajectories:
    # 64x64 frame: diagonal = sqrt(64^2 + 64^2) = 90.51, threshold = 1.8102 px.

    def test_threshold_value(self):
        assert 0.02 * math.hypot(64, 64) == pytest.approx(1.8102, abs=1e-4)

    def test_stationary_discarded(self):
        trajs = make_trajs(straight_line((10, 10), (0, 0), 12)[None])
        assert filter_trajectories(trajs, 0.5).num_points == 0

    def test_slow_mover_discarded(self):
        # 0.25 px/frame -> exactly 1 px per 4-frame window < 1.8102.
        trajs = make_trajs(straight_line((10, 10), (0.25, 0), 12)[None])
        d = windowed_displacements(trajs.points, 4)
        assert d.max() == pytest.approx(1.0, abs=1e-5)
        assert filter_trajectories(trajs, 0.5).num_points == 0

    def test_fast_but_unconfident_discarded(self):
        pts = straight_line((5, 5), (3, 0), 12)[None]
        conf = np.full((1, 12), 0.3, dtype=np.float32)
        trajs = make_trajs(pts, conf)
        assert filter_trajectories(trajs, 0.5).num_points == 0

    def test_fast_confident_kept(self):
        trajs = make_trajs(straight_line((5, 5), (3, 0), 12)[None])
        assert filter_trajectories(trajs, 0.5).num_points == 1

    def test_ten_px_jumper_kept(self):
        pts = np.tile(np.array([[20.0, 20.0]]), (12, 1))
        pts[6:] = [30.0, 20.0]  # one 10-px jump
        trajs = make_trajs(pts[None])
        assert filter_trajectories(trajs, 0.5).num_points == 1

    def test_too_short_sequence(self):
        trajs = make_trajs(straight_line((5, 5), (3, 0), 4)[None])
        with pytest.raises(ValueError, match="minimum sequence length"):
            filter_trajectories(trajs, 0.5, window=4)

    def test_monotone_in_confidence_threshold(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 64, size=(20, 12, 2)).astype(np.float32)
        conf = rng.uniform(0, 1, size=(20, 12)).astype(np.float32)
        trajs = make_trajs(pts, conf)
        sizes = [filter_trajectories(trajs, tc).num_points for tc in (0.1, 0.3, 0.5, 0.7, 0.9)]
        assert sizes == sorted(sizes, reverse=True)

    def test_monotone_in_ratio(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(0, 64, size=(20, 12, 2)).astype(np.float32)
        trajs = make_trajs(pts)
        sizes = [
            filter_trajectories(trajs, 0.5, ratio=r).num_points
            for r in (0.005, 0.01, 0.02, 0.05, 0.2)
        ]
        assert sizes == sorted(sizes, reverse=True)

    def test_commutes_with_permutation(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(0, 64, size=(10, 12, 2)).astype(np.float32)
        conf = rng.uniform(0, 1, size=(10, 12)).astype(np.float32)
        perm = rng.permutation(10)
        kept = filter_trajectories(make_trajs(pts, conf), 0.5)
        kept_perm = filter_trajectories(make_trajs(pts[perm], conf[perm]), 0.5)
        assert sorted(map(tuple, kept.points[:, 0].tolist())) == sorted(
            map(tuple, kept_perm.points[:, 0].tolist())
        )


class TestRenderPrompt:
    def test_empty_set_identity(self):
        frame = np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)
        empty = make_trajs(np.zeros((0, 5, 2)))
        assert np.array_equal(render_prompt(frame, empty), frame)

    def test_horizontal_segment_pixel_diff(self):
        frame = np.full((64, 64, 3), 200, dtype=np.uint8)
        pts = straight_line((10, 20), (5, 0), 5)[None]  # x from 10 to 30 at y = 20
        out = render_prompt(frame, make_trajs(pts))
        diff = np.argwhere((out != frame).any(axis=-1))
        expected = {(20, x) for x in range(10, 31)}
        assert {tuple(p) for p in diff} == expected

    def test_idempotent_for_duplicate_paths(self):
        frame = np.zeros((64, 64, 3), dtype=np.uint8)
        pts = straight_line((5, 5), (2, 3), 6)
        one = render_prompt(frame, make_trajs(pts[None]))
        two = render_prompt(frame, make_trajs(np.stack([pts, pts])))
        assert np.array_equal(one, two)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        frame = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
        pts = rng.uniform(0, 63, size=(3, 8, 2)).astype(np.float32)
        a = render_prompt(frame, make_trajs(pts))
        b = render_prompt(frame, make_trajs(pts))
        assert np.array_equal(a, b)

    def test_offframe_points_clipped(self):
        frame = np.zeros((32, 32, 3), dtype=np.uint8)
        pts = straight_line((-10, 5), (10, 0), 5)[None]
        out = render_prompt(frame, make_trajs(pts, h=32, w=32))
        assert out.shape == frame.shape  # draws only in-bounds pixels

    def test_color_sweeps_blue_to_red(self):
        frame = np.zeros((64, 64, 3), dtype=np.uint8)
        pts = straight_line((2, 10), (6, 0), 9)[None]
        out = render_prompt(frame, make_trajs(pts))
        first = out[10, 2]
        last = out[10, 50]
        assert first[2] > first[0]  # blue end
        assert last[0] > last[2]  # red end


class TestPromptDropout:
    def test_p_zero_always_true(self):
        rng = np.random.default_rng(0)
        assert all(prompt_dropout(0.0, rng) for _ in range(100))

    def test_p_one_always_false(self):
        rng = np.random.default_rng(0)
        assert not any(prompt_dropout(1.0, rng) for _ in range(100))

    def test_half_rate_within_binomial_bound(self):
        rng = np.random.default_rng(123)
        draws = [prompt_dropout(0.5, rng) for _ in range(10_000)]
        false_fraction = 1 - np.mean(draws)
        assert 0.47 <= false_fraction <= 0.53

    def test_deterministic_given_state(self):
        a = [prompt_dropout(0.5, np.random.default_rng(7)) for _ in range(50)]
        b = [prompt_dropout(0.5, np.random.default_rng(7)) for _ in range(50)]
        assert a == b

    def test_invalid_p(self):
        with pytest.raises(ValueError):
            prompt_dropout(1.5, np.random.default_rng(0))


class TestReplicateFrames:
    def test_single_frame(self):
        assert replicate_frames(["f"], 4) == ["f", "f", "f", "f"]

    def test_two_frames_to_five(self):
        # ceil(5/2) = 3 repeats each, truncated to 5.
        assert replicate_frames(["a", "b"], 5) == ["a", "a", "a", "b", "b"]

    def test_long_enough_unchanged(self):
        frames = list(range(6))
        assert replicate_frames(frames, 4) == frames

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            replicate_frames([], 3)

    @given(st.integers(1, 6), st.integers(1, 20))
    def test_length_and_order(self, n, required):
        frames = list(range(n))
        out = replicate_frames(frames, required)
        assert len(out) == max(n, required)
        assert out == sorted(out)


def _token_map(scales, role, v=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return MultiScaleTokenMap(
        frame_index=0,
        role=role,
        maps=[(s, torch.randint(0, v, (s, s), generator=g)) for s in scales],
        codebook_size=v,
    )


class TestAssembleDualBranch:
    schedule = ScaleSchedule(obs_scales=(1, 2), fut_scales=(1,), latent_base=2)

    def test_disabled_matches_plain_layout(self):
        obs = [_token_map((1, 2), "observed")]
        prefix = assemble_dual_branch(None, obs, False, self.schedule, 16)
        plain = build_layout(self.schedule, 2, 1, with_prompt=False, codebook_size=16)
        plain_prefix = [b for b in plain.blocks if b.frame <= 1]
        assert [(b.kind, b.frame, b.scale, b.size) for b in prefix.blocks] == [
            (b.kind, b.frame, b.scale, b.size) for b in plain_prefix
        ]

    def test_prefix_length_arithmetic(self):
        # Prompt pseudo-frame: START + 1 + 4 tokens, then one SEP, then the
        # observed frame (START + 1 + 4).
        obs = [_token_map((1, 2), "observed")]
        prompt = _token_map((1, 2), "observed", seed=1)
        prefix = assemble_dual_branch(prompt, obs, True, self.schedule, 16)
        prompt_positions = sum(
            b.size for b in prefix.blocks if b.frame == 0 and b.kind != KIND_SEP
        )
        sep_positions = sum(b.size for b in prefix.blocks if b.kind == KIND_SEP)
        assert prompt_positions == 1 + 1 + 4
        assert sep_positions == 1
        assert prefix.length == 7 + 6

    def test_different_prompts_differ_only_in_prompt_blocks(self):
        obs = [_token_map((1, 2), "observed")]
        p1 = assemble_dual_branch(_token_map((1, 2), "observed", seed=1), obs, True, self.schedule, 16)
        p2 = assemble_dual_branch(_token_map((1, 2), "observed", seed=2), obs, True, self.schedule, 16)
        for b, t1, t2 in zip(p1.blocks, p1.tokens, p2.tokens):
            if b.kind == KIND_PROMPT:
                continue
            if t1 is None:
                assert t2 is None
            else:
                assert torch.equal(t1, t2)

    def test_wrong_role_rejected(self):
        obs = [_token_map((1, 2), "observed")]
        bad_prompt = _token_map((1,), "future")
        with pytest.raises(ValueError, match="observed"):
            assemble_dual_branch(bad_prompt, obs, True, self.schedule, 16)


class TestTrajectoryFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        trajs = make_trajs(rng.uniform(0, 64, (9, 7, 2)).astype(np.float32),
                           rng.uniform(0, 1, (9, 7)).astype(np.float32), g=3)
        save_trajectories(trajs, tmp_path / "t")
        back = load_trajectories(tmp_path / "t")
        assert np.array_equal(back.points, trajs.points)
        assert np.array_equal(back.confidence, trajs.confidence)
        assert (back.height, back.width, back.grid_size) == (64, 64, 3)

    def test_size_mismatch_rejected(self, tmp_path):
        trajs = make_trajs(np.zeros((4, 6, 2), np.float32), g=2)
        save_trajectories(trajs, tmp_path / "t")
        data = (tmp_path / "t" / "points.bin").read_bytes()
        (tmp_path / "t" / "points.bin").write_bytes(data[:-8])
        with pytest.raises(ValueError, match="points.bin"):
            load_trajectories(tmp_path / "t")
