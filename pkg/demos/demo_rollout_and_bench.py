"""Train a tiny model end-to-end, roll it out with the KV cache, and compare
scale-wise vs raster decoding speed.

Uses a micro configuration so the whole script runs in about a minute on a
laptop CPU; the same calls scale to the desk config via the CLI.

Run: python demos/demo_rollout_and_bench.py
"""

import numpy as np
import torch

from scalewm.bench import bench_decode, format_bench_table
from scalewm.config import DataConfig, FullConfig, ModelConfig, RunConfig, ScaleSchedule
from scalewm.data import SpritesEnv, generate_episode
from scalewm.metrics import psnr
from scalewm.model import WorldModel
from scalewm.rollout import SamplingConfig, best_of_n, rollout
from scalewm.tokenizer import MultiScaleTokenizer
from scalewm.training import fit_tokenizer, fit_world_model

torch.manual_seed(0)
cfg = FullConfig(
    model=ModelConfig(depth=2, width=64, heads=2, dropout=0.0, ffn_dim=128,
                      action_dim=2, codebook_size=64, embed_dim=16),
    schedule=ScaleSchedule(obs_scales=(1, 2, 4, 8), fut_scales=(1, 2, 4), latent_base=8),
    run=RunConfig(context_frames=1, sequence_length=3, peak_lr=2e-3, warmup_steps=20,
                  total_steps=300, top_k=16),
    data=DataConfig(image_size=32, episode_length=3),
)

env = SpritesEnv(cfg.data.image_size, 1)
rng = np.random.default_rng(0)
episodes = [generate_episode(env, 3, rng) for _ in range(2)]

tokenizer = MultiScaleTokenizer(cfg.model, cfg.schedule, cfg.data.image_size, channels=(32, 64))
print("== tokenizer training ==")
fit_tokenizer(tokenizer, episodes, cfg, epochs=60, log_every=20)

model = WorldModel(cfg.model, max_scale=cfg.schedule.latent_base)
print("\n== world-model training (teacher forced, tokenizer frozen) ==")
fit_world_model(model, tokenizer, episodes, cfg, steps=300, log_every=100, stop_below_ce=0.05)

print("\n== greedy rollout ==")
ep = episodes[0]
result = rollout(ep.frames[:1], ep.actions[:2], 3, model, tokenizer,
                 SamplingConfig(greedy=True), seed=0)
for i, frame in enumerate(result.frames):
    print(f"frame {i + 2}: PSNR vs ground truth {psnr(frame, ep.frames[i + 1]):.1f} dB, "
          f"predicted reward {result.rewards[i]:+.3f} (true {ep.rewards[i + 1]:+.3f})")

print("\n== best-of-4 stochastic futures ==")
res = best_of_n(ep.frames[:1], ep.actions[:2], ep.frames[1:3], 4, "psnr",
                model, tokenizer, SamplingConfig(top_k=16), base_seed=0)
print(f"scores: {[f'{s:.1f}' for s in res.scores]}; best sample {res.best_index}")

print("\n== decode benchmark (same weights, both layouts) ==")
rows = [bench_decode(model, tokenizer, kind, batch=4, frames=2, repeats=3)
        for kind in ("scalewise", "raster")]
print(format_bench_table(rows))
