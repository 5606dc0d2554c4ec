"""Minimal diffusion transformer with flow matching and an Euler sampler.

Time runs from noise (t=0) to data (t=1): ``z_t = t z0 + (1 - t) eps`` and the
regression target is ``z0 - eps``. Images are channels-last ``[B, H, W, 3]``
in pixel space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .conditioning import ConditionEncoder, RefinerConfig
from .diffcore import ShapeError, patchify, unpatchify
from .layers import Mlp, merge_heads, split_heads, attend
from .selattn import SelectionStrategy, SelectiveAttention, build_joint_mask


@dataclass(frozen=True)
class DiTConfig:
    patch: int = 4
    dim: int = 64
    heads: int = 4
    depth: int = 4
    time_dim: int = 64
    sampler_steps: int = 32
    strategy: SelectionStrategy = field(default_factory=lambda: SelectionStrategy("top-k", k=8))
    refiner: str = "fusion"
    refiner_depth: int = 2
    # MA: both the refiner text->image mask and the joint noise->condition mask
    masked_attention: bool = True
    # SA: the selective-attention residual branch
    selective_attention: bool = True
    # when False, noise queries cannot see condition keys in joint attention
    noise_sees_cond: bool = True
    garment_size: int = 16
    garment_patch: int = 4
    max_rows: int = 6
    max_cols: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    @property
    def refiner_config(self) -> RefinerConfig:
        return RefinerConfig(self.refiner, self.refiner_depth, self.dim, self.heads, self.masked_attention)


# ---------------------------------------------------------------- flow matching


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def _bcast_t(t, like):
    t = torch.as_tensor(t, dtype=like.dtype)
    return t.reshape(t.shape + (1,) * (like.dim() - t.dim())) if t.dim() else t


def interpolate(z0, eps, t):
    """``t z0 + (1 - t) eps``; ``t`` is a scalar or one value per batch item."""
    _same_shape("interpolate", z0, eps)
    t = _bcast_t(t, z0)
    return t * z0 + (1 - t) * eps


def velocity_target(z0, eps):
    _same_shape("velocity_target", z0, eps)
    return z0 - eps


def fm_loss(v_pred, z0, eps):
    target = velocity_target(z0, eps)
    _same_shape("fm_loss", v_pred, target)
    return ((v_pred - target) ** 2).mean()


def timestep_embedding(t, dim: int, max_period: float = 10000.0):
    """Sinusoidal embedding of ``1000 t``."""
    half = dim // 2
    dtype = t.dtype if t.is_floating_point() else torch.float32
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype) / half)
    args = 1000.0 * t.to(dtype)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


# ---------------------------------------------------------------- model


class DiTBlock(nn.Module):
    """Two-stream block over ``[C || Z]``.

    Only the noise stream Z is modulated by time, and every Z update is
    multiplied by a gate that starts at zero.
    """

    def __init__(self, cfg: DiTConfig, last: bool = False):
        super().__init__()
        d = cfg.dim
        self.heads = cfg.heads
        self.selective = cfg.selective_attention
        # in the final block, C updates are only kept if selective attention reads them
        self.c_attn_out = not last or self.selective
        self.c_mlp = not last
        n_mod = 9 if self.selective else 6
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(d, n_mod * d))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

        self.norm_z1 = nn.LayerNorm(d, elementwise_affine=False)
        self.norm_c1 = nn.LayerNorm(d)
        self.qkv_z = nn.Linear(d, 3 * d)
        self.qkv_c = nn.Linear(d, 3 * d)
        self.proj_z = nn.Linear(d, d)
        if self.c_attn_out:
            self.proj_c = nn.Linear(d, d)
        if self.selective:
            self.norm_z2 = nn.LayerNorm(d, elementwise_affine=False)
            self.norm_c2 = nn.LayerNorm(d)
            self.sel = SelectiveAttention(d, cfg.heads, cfg.strategy)
        self.norm_z3 = nn.LayerNorm(d, elementwise_affine=False)
        self.mlp_z = Mlp(d)
        if self.c_mlp:
            self.norm_c3 = nn.LayerNorm(d)
            self.mlp_c = Mlp(d)

    def forward(self, z, c, temb, allowed):
        mods = self.ada(temb)[:, None].chunk(9 if self.selective else 6, dim=-1)
        nc, h = c.shape[1], self.heads

        zq = modulate(self.norm_z1(z), mods[0], mods[1])
        qkv = torch.cat([self.qkv_c(self.norm_c1(c)), self.qkv_z(zq)], dim=1)
        q, k, v = (split_heads(x, h) for x in qkv.chunk(3, dim=-1))
        out = merge_heads(attend(q, k, v, allowed))
        if self.c_attn_out:
            c = c + self.proj_c(out[:, :nc])
        z = z + mods[2] * self.proj_z(out[:, nc:])

        if self.selective:
            zs = modulate(self.norm_z2(z), mods[3], mods[4])
            z = z + mods[5] * self.sel(zs, self.norm_c2(c))

        zm = modulate(self.norm_z3(z), mods[-3], mods[-2])
        z = z + mods[-1] * self.mlp_z(zm)
        if self.c_mlp:
            c = c + self.mlp_c(self.norm_c3(c))
        return z, c


class DiT(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        d, p = cfg.dim, cfg.patch
        self.patch_embed = nn.Linear(3 * p * p, d)
        self.row_pos = nn.Parameter(torch.randn(cfg.max_rows, d) * 0.02)
        self.col_pos = nn.Parameter(torch.randn(cfg.max_cols, d) * 0.02)
        self.t_mlp = nn.Sequential(nn.Linear(cfg.time_dim, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(DiTBlock(cfg, last=i == cfg.depth - 1) for i in range(cfg.depth))
        self.final_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, 3 * p * p)

    def embed(self, z):
        b, hgt, wid, _ = z.shape
        p = self.cfg.patch
        rows, cols = hgt // p, wid // p
        if hgt % p or wid % p or rows > self.cfg.max_rows or cols > self.cfg.max_cols:
            raise ShapeError("model_forward", z.shape, detail=f"patch {p}, max grid {self.cfg.max_rows}x{self.cfg.max_cols}")
        pos = (self.row_pos[:rows, None, :] + self.col_pos[None, :cols, :]).reshape(rows * cols, -1)
        return self.patch_embed(patchify(z, p)) + pos

    def forward(self, z_t, t, c, trace: list | None = None):
        """Velocity for ``z_t`` at time ``t`` given condition tokens ``c``.

        If ``trace`` is a list, the condition-stream activations after every
        block are appended to it.
        """
        if c.shape[1] == 0:
            raise ShapeError("model_forward", c.shape, detail="empty condition")
        b, hgt, wid, _ = z_t.shape
        t = torch.as_tensor(t, dtype=z_t.dtype)
        if t.dim() == 0:
            t = t.expand(b)
        x = self.embed(z_t)
        temb = self.t_mlp(timestep_embedding(t, self.cfg.time_dim).to(z_t.dtype))
        allowed = build_joint_mask(
            c.shape[1], x.shape[1], self.cfg.masked_attention, self.cfg.noise_sees_cond
        )
        for blk in self.blocks:
            x, c = blk(x, c, temb, allowed)
            if trace is not None:
                trace.append(c)
        out = self.head(self.final_norm(x))
        return unpatchify(out, hgt, wid, self.cfg.patch)


class GarmentFlow(nn.Module):
    """Condition encoder + DiT; parameter names start with ``cond.`` or ``dit.``."""

    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        self.cond = ConditionEncoder(cfg.refiner_config, cfg.garment_size, cfg.garment_patch)
        self.dit = DiT(cfg)

    def condition(self, prompt_ids, garment):
        return self.cond(prompt_ids, garment)

    def velocity(self, z_t, t, c):
        return self.dit(z_t, t, c)

    def forward(self, z_t, t, prompt_ids, garment):
        return self.dit(z_t, t, self.cond(prompt_ids, garment))


def build_model(cfg: DiTConfig, seed: int = 0, dtype=torch.float32) -> GarmentFlow:
    """Deterministic initialization from ``seed`` without touching the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = GarmentFlow(cfg)
    return model.to(dtype)


def is_refiner_param(name: str) -> bool:
    return name.startswith("cond.refiner.")


# ---------------------------------------------------------------- sampling


def noise_like(shape, seed: int, dtype=torch.float32):
    """Standard-normal draw from ``seed``; any non-negative integer size is usable."""
    rng = np.random.default_rng(int(seed))
    return torch.from_numpy(rng.standard_normal(tuple(shape), dtype=np.float32)).to(dtype)


@torch.no_grad()
def euler_sample(velocity_fn, c, height: int, width: int, steps: int, seeds, clamp: bool = True):
    """Integrate ``dz/dt = v(z, t, c)`` from noise at t=0 to t=1.

    ``seeds`` gives one noise seed per batch item of ``c``. ``velocity_fn`` is
    called as ``velocity_fn(z, t, c)``; a :class:`GarmentFlow`'s ``velocity``
    method fits.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if isinstance(seeds, int):
        seeds = [seeds]
    if c.shape[0] != len(seeds):
        raise ShapeError("euler_sample", c.shape, (len(seeds),), detail="one seed per condition")
    z = torch.stack([noise_like((height, width, 3), s, c.dtype) for s in seeds])
    dt = 1.0 / steps
    for i in range(steps):
        t = torch.full((z.shape[0],), i / steps, dtype=z.dtype)
        z = z + dt * velocity_fn(z, t, c)
    return z.clamp(0.0, 1.0) if clamp else z
