"""Inspect the flattened token stream and its block-causal attention mask.

Run: python demos/demo_stream_and_mask.py
"""

import torch

from scalewm.config import ScaleSchedule
from scalewm.layout import (
    block_causal_mask,
    build_layout,
    build_raster_layout,
    layout_table,
    sequential_steps_per_future_frame,
)

# A tiny schedule keeps the mask printable.
schedule = ScaleSchedule(obs_scales=(1, 2), fut_scales=(1,), latent_base=2)

layout = build_layout(schedule, num_frames=2, context_frames=1, with_prompt=True, codebook_size=16)
print(layout_table(layout))

mask = block_causal_mask(layout)
print("\nblock-causal mask (1 = may attend; bidirectional inside blocks):")
for row in mask.to(torch.int).tolist():
    print(" ".join(str(v) for v in row))

# The benchmark's step accounting comes straight from the layouts.
desk = ScaleSchedule(obs_scales=(1, 2, 3, 4, 5, 6, 8, 10, 13, 16), fut_scales=(1, 2, 3, 4, 5, 6), latent_base=16)
scalewise = build_layout(desk, 3, 2, with_prompt=False, codebook_size=512)
raster = build_raster_layout(16, 3, 2, codebook_size=512)
print(
    f"\nsequential decode steps per future frame: "
    f"scale-wise {sequential_steps_per_future_frame(scalewise)} vs "
    f"raster {sequential_steps_per_future_frame(raster)}"
)
