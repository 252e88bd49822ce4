"""Asymmetric multi-scale vector-quantized tokenizer.

Observed frames are tokenized over the full scale list; future frames use the
sparse prefix and receive cross-attention context from observed frames before
quantization. The two role branches share an architecture but keep disjoint,
independently updated parameter sets and separate codebooks.

Quantization is residual and coarse-to-fine: at each scale the running
residual is downsampled, quantized against the role's codebook, upsampled
back to the base grid, and subtracted; reconstructions sum over scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from scalewm.config import ModelConfig, ScaleSchedule

ROLES = ("observed", "future")


class Codebook(nn.Module):
    """Learned embedding table for one role, updated by gradient."""

    def __init__(self, size: int, dim: int, role: str):
        super().__init__()
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.size = size
        self.dim = dim
        self.role = role
        self.entries = nn.Parameter(torch.randn(size, dim) / math.sqrt(dim))
        # Step at which each code was last selected, for dead-code resets.
        self.register_buffer("last_used", torch.zeros(size, dtype=torch.long))

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        return self.entries[indices]


def quantize(vector: torch.Tensor, codebook: Codebook) -> tuple[int, torch.Tensor]:
    """Nearest codebook row by squared distance; ties go to the lowest index."""
    vector = torch.as_tensor(vector, dtype=codebook.entries.dtype)
    if not torch.isfinite(vector).all():
        raise ValueError("quantize requires a finite input vector")
    dist = ((codebook.entries - vector[None, :]) ** 2).sum(dim=1)
    index = int(torch.argmin(dist).item())
    return index, codebook.entries[index].detach().clone()


def resize_latent(grid: torch.Tensor, size: int, down: bool) -> torch.Tensor:
    """Bilinear resize of a (B, C, H, W) latent; antialiased when downsampling."""
    if grid.shape[-1] == size:
        return grid
    return F.interpolate(grid, size=(size, size), mode="bilinear", antialias=down)


def quantize_cells(cells: torch.Tensor, codebook: Codebook) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched nearest-row quantization over (..., dim) cells.

    Returns (indices, quantized) with quantized carrying gradient to the
    codebook entries only.
    """
    if not torch.isfinite(cells).all():
        raise ValueError("quantize requires finite inputs")
    flat = cells.reshape(-1, codebook.dim)
    # ||x - e||^2 expanded; argmin returns the first (lowest) index on ties.
    d = (
        (flat * flat).sum(1, keepdim=True)
        - 2.0 * flat @ codebook.entries.t()
        + (codebook.entries * codebook.entries).sum(1)[None, :]
    )
    indices = torch.argmin(d, dim=1)
    quantized = codebook.entries[indices]
    return indices.reshape(cells.shape[:-1]), quantized.reshape(cells.shape)


@dataclass
class MultiScaleTokenMap:
    """Per-frame hierarchy of index grids, one per scale, over one codebook."""

    frame_index: int
    role: str
    maps: list[tuple[int, torch.Tensor]]  # (scale, LongTensor L x L)
    codebook_size: int

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        for scale, grid in self.maps:
            if grid.shape != (scale, scale):
                raise ValueError(f"grid for scale {scale} has shape {tuple(grid.shape)}")
            if grid.numel() and (grid.min() < 0 or grid.max() >= self.codebook_size):
                raise ValueError(
                    f"token index out of range [0, {self.codebook_size}) at scale {scale}"
                )

    @property
    def scales(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.maps)


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(groups, channels), channels)


class _Encoder(nn.Module):
    def __init__(self, embed_dim: int, n_down: int, channels: tuple[int, ...], groups: int):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(3, channels[0], 3, padding=1), _norm(channels[0], groups), nn.SiLU()]
        c = channels[0]
        for i in range(n_down):
            nxt = channels[min(i + 1, len(channels) - 1)]
            layers += [nn.Conv2d(c, nxt, 4, stride=2, padding=1), _norm(nxt, groups), nn.SiLU()]
            c = nxt
        layers += [nn.Conv2d(c, c, 3, padding=1), _norm(c, groups), nn.SiLU(), nn.Conv2d(c, embed_dim, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class _Decoder(nn.Module):
    def __init__(self, embed_dim: int, n_up: int, channels: tuple[int, ...], groups: int):
        super().__init__()
        c = channels[min(n_up, len(channels) - 1)]
        layers: list[nn.Module] = [nn.Conv2d(embed_dim, c, 3, padding=1), _norm(c, groups), nn.SiLU()]
        for i in range(n_up):
            nxt = channels[max(len(channels) - 2 - i, 0)] if n_up > 1 else channels[0]
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(c, nxt, 3, padding=1),
                _norm(nxt, groups),
                nn.SiLU(),
            ]
            c = nxt
        layers += [nn.Conv2d(c, 3, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class _CrossAttention(nn.Module):
    """Single attention layer: future latent cells query observed context."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"heads ({heads}) must divide embed dim ({dim})")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, queries: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, n, d = queries.shape
        m = context.shape[1]
        q = self.q(queries).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(context).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(context).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


def frames_to_float(frames) -> torch.Tensor:
    """uint8 HxWx3 (optionally batched) -> float32 Bx3xHxW in [0, 1]."""
    x = torch.as_tensor(frames)
    if x.dtype == torch.uint8:
        x = x.float() / 255.0
    if x.ndim == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2).contiguous()


def float_to_frames(x: torch.Tensor):
    """Bx3xHxW float in [0, 1] -> BxHxWx3 uint8."""
    x = (x.clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).contiguous()


class MultiScaleTokenizer(nn.Module):
    """Both role branches plus the future branch's cross-attention."""

    def __init__(
        self,
        model: ModelConfig,
        schedule: ScaleSchedule,
        image_size: int = 64,
        channels: tuple[int, ...] = (64, 128),
        groups: int = 8,
        cross_attn_heads: int = 4,
        commitment_beta: float = 0.25,
    ):
        super().__init__()
        stride = image_size // schedule.latent_base
        if stride * schedule.latent_base != image_size or stride & (stride - 1):
            raise ValueError(
                f"image_size {image_size} must be latent_base {schedule.latent_base} "
                "times a power-of-two stride"
            )
        self.schedule = schedule
        self.image_size = image_size
        self.embed_dim = model.embed_dim
        self.codebook_size = model.codebook_size
        self.beta = commitment_beta
        n_down = int(math.log2(stride))
        self.encoders = nn.ModuleDict(
            {r: _Encoder(model.embed_dim, n_down, channels, groups) for r in ROLES}
        )
        self.decoders = nn.ModuleDict(
            {r: _Decoder(model.embed_dim, n_down, channels, groups) for r in ROLES}
        )
        self.codebooks = nn.ModuleDict(
            {r: Codebook(model.codebook_size, model.embed_dim, r) for r in ROLES}
        )
        self.cross_attn = _CrossAttention(model.embed_dim, cross_attn_heads)
        self._step_counter = 0
        # Ring buffer of recent encoder cells for dead-code resets.
        self.register_buffer("_recent_cells", torch.zeros(1024, model.embed_dim))
        self.register_buffer("_recent_ptr", torch.zeros((), dtype=torch.long))

    # -- latent-space residual pipeline ------------------------------------

    def _resize(self, grid: torch.Tensor, size: int, down: bool) -> torch.Tensor:
        return resize_latent(grid, size, down)

    def quantize_latent(
        self, latent: torch.Tensor, role: str, scales: tuple[int, ...] | None = None
    ) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Residual coarse-to-fine quantization of a base-grid latent.

        Returns per-scale index grids (B x L x L) and the accumulated
        quantized latent (with gradient to codebook entries).
        """
        if scales is None:
            scales = self.schedule.scales_for_role(role)
        codebook = self.codebooks[role]
        base = self.schedule.latent_base
        residual = latent
        accum = torch.zeros_like(latent)
        index_grids = []
        for scale in scales:
            down = self._resize(residual, scale, down=True)
            cells = down.permute(0, 2, 3, 1)
            idx, q = quantize_cells(cells, codebook)
            up = self._resize(q.permute(0, 3, 1, 2), base, down=False)
            accum = accum + up
            residual = residual - up.detach()
            index_grids.append(idx)
            if self.training:
                codebook.last_used[idx.reshape(-1).unique()] = self._step_counter
        return index_grids, accum

    def codes_to_latent(
        self, index_grids: list[torch.Tensor], role: str, scales: tuple[int, ...]
    ) -> torch.Tensor:
        """Sum of upsampled codeword maps for any schedule prefix."""
        codebook = self.codebooks[role]
        base = self.schedule.latent_base
        accum = None
        for scale, idx in zip(scales, index_grids):
            if idx.min() < 0 or idx.max() >= codebook.size:
                raise ValueError(f"token index out of range [0, {codebook.size})")
            emb = codebook.lookup(idx).permute(0, 3, 1, 2)
            up = self._resize(emb, base, down=False)
            accum = up if accum is None else accum + up
        if accum is None:
            raise ValueError("cannot decode an empty token list")
        return accum

    # -- public per-frame operations ----------------------------------------

    def encode_latent(self, frames: torch.Tensor, role: str, context: torch.Tensor | None):
        """Encoder latent for float frames, with future-branch cross-attention."""
        f = self.encoders[role](frames)
        if role == "future":
            if context is None:
                raise ValueError("future-role encoding requires observed context tokens")
            b, d, h, w = f.shape
            cells = f.permute(0, 2, 3, 1).reshape(b, h * w, d)
            attended = self.cross_attn(cells, context)
            f = f + attended.reshape(b, h, w, d).permute(0, 3, 1, 2)
        return f

    def encode_multiscale(
        self,
        frame,
        role: str,
        frame_index: int = 0,
        context: torch.Tensor | None = None,
    ) -> MultiScaleTokenMap:
        """Tokenize one frame (H x W x 3, uint8 or [0,1] float) for a role."""
        scales = self.schedule.scales_for_role(role)
        x = frames_to_float(frame).to(self.codebooks[role].entries.dtype)
        if x.shape[-1] != self.image_size or x.shape[-2] != self.image_size:
            raise ValueError(
                f"frame is {x.shape[-2]}x{x.shape[-1]}, tokenizer expects "
                f"{self.image_size}x{self.image_size}"
            )
        with torch.no_grad():
            f = self.encode_latent(x, role, context)
            grids, _ = self.quantize_latent(f, role, scales)
        return MultiScaleTokenMap(
            frame_index=frame_index,
            role=role,
            maps=[(s, g[0]) for s, g in zip(scales, grids)],
            codebook_size=self.codebook_size,
        )

    def decode_multiscale(self, tokens: MultiScaleTokenMap) -> torch.Tensor:
        """Decode a token map (or any prefix of one) back to an HxWx3 uint8 frame."""
        role_scales = self.schedule.scales_for_role(tokens.role)
        scales = tokens.scales
        if scales != role_scales[: len(scales)]:
            raise ValueError(
                f"token scales {scales} are not a prefix of the {tokens.role} "
                f"schedule {role_scales}"
            )
        with torch.no_grad():
            latent = self.codes_to_latent(
                [g[None] for _, g in tokens.maps], tokens.role, scales
            )
            img = self.decoders[tokens.role](latent)
        return float_to_frames(img)[0]

    def context_from_observed(self, obs_frames: torch.Tensor) -> torch.Tensor:
        """Quantized observed latents at base resolution, flattened for
        cross-attention keys/values: (1, T0 * base^2, dim), detached so the
        future branch never updates observed parameters."""
        obs_frames = obs_frames.to(self.codebooks["observed"].entries.dtype)
        with torch.no_grad():
            f = self.encoders["observed"](obs_frames)
            _, accum = self.quantize_latent(f, "observed")
        return accum.permute(0, 2, 3, 1).reshape(1, -1, f.shape[1]).detach()

    # -- training ------------------------------------------------------------

    def tokenizer_loss(
        self,
        frames,
        role: str,
        context: torch.Tensor | None = None,
        beta: float | None = None,
        bypass_quantization: bool = False,
    ) -> tuple[torch.Tensor, dict]:
        """Reconstruction MSE plus beta-weighted VQ terms.

        Codewords follow the encoder output (gradient through the quantized
        sum vs the detached latent) and the encoder is pulled toward the
        codewords (commitment); the straight-through estimator passes decoder
        gradients through the discrete argmin. ``bypass_quantization``
        replaces the discrete step with the identity, making the whole loss
        differentiable for finite-difference checks.
        """
        beta = self.beta if beta is None else beta
        x = frames_to_float(frames).to(self.codebooks[role].entries.dtype)
        f = self.encode_latent(x, role, context)
        if bypass_quantization:
            recon = self.decoders[role](f)
            loss = F.mse_loss(recon, x)
            return loss, {"recon_mse": float(loss.detach()), "vq": 0.0}
        grids, accum = self.quantize_latent(f, role)
        ste = f + (accum - f).detach()
        recon = self.decoders[role](ste)
        recon_mse = F.mse_loss(recon, x)
        commit = F.mse_loss(f, accum.detach())
        follow = F.mse_loss(accum, f.detach())
        loss = recon_mse + beta * (commit + follow)
        if self.training:
            self._cache_cells(f)
        usage = torch.cat([g.reshape(-1) for g in grids]).unique().numel()
        return loss, {
            "recon_mse": float(recon_mse.detach()),
            "vq": float((commit + follow).detach()),
            "codes_used": usage,
        }

    def _cache_cells(self, f: torch.Tensor) -> None:
        cells = f.detach().permute(0, 2, 3, 1).reshape(-1, self.embed_dim)
        n = min(cells.shape[0], self._recent_cells.shape[0])
        ptr = int(self._recent_ptr)
        idx = (ptr + torch.arange(n)) % self._recent_cells.shape[0]
        self._recent_cells[idx] = cells[:n]
        self._recent_ptr.fill_((ptr + n) % self._recent_cells.shape[0])

    def begin_step(self, step: int) -> None:
        self._step_counter = step

    def reinit_dead_codes(self, step: int, patience: int = 2000) -> int:
        """Reset codewords unused for ``patience`` steps to recent encoder cells."""
        reset = 0
        with torch.no_grad():
            for role in ROLES:
                cb = self.codebooks[role]
                dead = (step - cb.last_used) >= patience
                n = int(dead.sum())
                if n == 0:
                    continue
                pick = torch.randint(0, self._recent_cells.shape[0], (n,))
                cb.entries.data[dead] = self._recent_cells[pick]
                cb.last_used[dead] = step
                reset += n
        return reset
