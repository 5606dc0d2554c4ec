"""Gradient checks of the op set and of a tiny end-to-end model."""
from __future__ import annotations

import torch

from .backbone import DiTConfig, build_model, fm_loss, interpolate
from .diffcore import GradCheckReport, check_op_set, default_step, gradcheck
from .selattn import SelectionStrategy

TINY = DiTConfig(
    patch=1,
    dim=8,
    heads=2,
    depth=1,
    time_dim=8,
    sampler_steps=2,
    strategy=SelectionStrategy("top-k", k=3),
    refiner="fusion",
    refiner_depth=1,
    garment_size=4,
    garment_patch=2,
    max_rows=2,
    max_cols=2,
)


def randomize(model: torch.nn.Module, seed: int, std: float = 0.5) -> None:
    """Overwrite every parameter, including zero-initialized gates, with noise."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * std)


def model_gradcheck(cfg: DiTConfig = TINY, seed: int = 0, tol: float = 1e-3, batch: int = 2) -> list[GradCheckReport]:
    """FM-loss gradients of every parameter vs. central differences, in float64."""
    model = build_model(cfg, seed, dtype=torch.float64)
    randomize(model, seed)
    g = torch.Generator().manual_seed(seed + 1)
    hgt = cfg.max_rows * cfg.patch
    wid = cfg.max_cols * cfg.patch
    z0 = torch.rand(batch, hgt, wid, 3, generator=g, dtype=torch.float64)
    eps = torch.randn(batch, hgt, wid, 3, generator=g, dtype=torch.float64)
    t = torch.rand(batch, generator=g, dtype=torch.float64)
    ids = torch.randint(0, 16, (batch, 4), generator=g)
    garment = torch.rand(batch, cfg.garment_size, cfg.garment_size, 3, generator=g, dtype=torch.float64)
    zt = interpolate(z0, eps, t)

    def loss():
        return fm_loss(model(zt, t, ids, garment), z0, eps)

    params = dict(model.named_parameters())
    return gradcheck("model", loss, params, h=default_step(torch.float64), tol=tol)


def run_all(tol: float = 1e-3, seed: int = 0) -> list[GradCheckReport]:
    return check_op_set(instances=10, seed=seed, tol=tol) + model_gradcheck(seed=seed, tol=tol)
