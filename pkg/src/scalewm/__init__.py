"""Scale-wise autoregressive world model with an asymmetric multi-scale
vector-quantized tokenizer, trajectory-aware motion prompts, action/reward
conditioning, KV-cached rollout, and a decode-throughput benchmark."""

from scalewm.config import (
    ConfigError,
    DataConfig,
    FullConfig,
    ModelConfig,
    RunConfig,
    ScaleSchedule,
    desk_config,
    load_config,
    scale_weights,
    scaled_model_config,
    write_config,
)

__all__ = [
    "ConfigError",
    "DataConfig",
    "FullConfig",
    "ModelConfig",
    "RunConfig",
    "ScaleSchedule",
    "desk_config",
    "load_config",
    "scale_weights",
    "scaled_model_config",
    "write_config",
]

__version__ = "0.1.0"
