import numpy as np
import pytest
import torch

from scalewm.config import DataConfig, FullConfig, ModelConfig, RunConfig, ScaleSchedule
from scalewm.data import SpritesEnv, generate_episode
from scalewm.model import WorldModel
from scalewm.tokenizer import MultiScaleTokenizer

torch.set_num_threads(2)


def micro_model_config(**overrides) -> ModelConfig:
    base = dict(
        depth=2, width=32, heads=2, dropout=0.0, ffn_dim=64,
        action_dim=2, codebook_size=16, embed_dim=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


def micro_schedule() -> ScaleSchedule:
    return ScaleSchedule(obs_scales=(1, 2, 4), fut_scales=(1, 2), latent_base=4)


def micro_full_config(**run_overrides) -> FullConfig:
    run = dict(
        context_frames=1, sequence_length=3, peak_lr=1e-3, warmup_steps=10,
        total_steps=200, top_k=5, top_p=0.9, seed=0,
    )
    run.update(run_overrides)
    return FullConfig(
        model=micro_model_config(),
        schedule=micro_schedule(),
        run=RunConfig(**run),
        data=DataConfig(image_size=16, episode_length=8, grid_size=4),
    )


@pytest.fixture()
def micro_tokenizer():
    torch.manual_seed(0)
    return MultiScaleTokenizer(
        micro_model_config(), micro_schedule(), image_size=16, channels=(16, 32), groups=4
    ).eval()


@pytest.fixture()
def micro_world_model():
    torch.manual_seed(1)
    return WorldModel(micro_model_config(), max_scale=4).eval()


@pytest.fixture()
def micro_episode():
    env = SpritesEnv(16, 1)
    return generate_episode(env, 8, np.random.default_rng(0))
