"""Exact consistency/alignment proxies, attention dumps, and the ablation harness."""
from __future__ import annotations

import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import GarmentFlow, interpolate, noise_like, euler_sample
from .config import RunConfig
from .imageio import atomic_write_bytes, write_pgm
from .worldgen import (
    SceneSpec,
    garment_region,
    make_prompt,
    placement_rect_mask,
    render_garment,
    render_scene,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- metrics


def _check_shape(img, spec: SceneSpec):
    b = spec.aspect
    if tuple(img.shape) != (b.height, b.width, 3):
        raise ValueError(f"image shape {tuple(img.shape)} does not match bucket {spec.bucket} ({b.height}x{b.width}x3)")


def _region_score(img, spec, region) -> float:
    err = np.clip(np.abs(np.asarray(img, dtype=np.float64) - render_scene(spec).astype(np.float64)), 0.0, 1.0)
    return float(1.0 - err[region].mean())


def garment_consistency(img, spec: SceneSpec) -> float:
    """1 - mean abs error against the ground-truth render over garment pixels."""
    _check_shape(img, spec)
    return _region_score(img, spec, garment_region(spec))


def text_alignment(img, spec: SceneSpec) -> float:
    """1 - mean abs error against the ground-truth background outside the placement rectangle."""
    _check_shape(img, spec)
    return _region_score(img, spec, ~placement_rect_mask(spec))


@dataclass
class EvalReport:
    seeds: list = field(default_factory=list)
    consistency: list = field(default_factory=list)
    alignment: list = field(default_factory=list)

    def add(self, seed, c, a):
        self.seeds.append(seed)
        self.consistency.append(c)
        self.alignment.append(a)

    @property
    def count(self) -> int:
        return len(self.seeds)

    def mean(self, which: str) -> float:
        return float(np.mean(getattr(self, which))) if self.seeds else float("nan")

    def std(self, which: str) -> float:
        return float(np.std(getattr(self, which))) if self.seeds else float("nan")

    def to_csv(self) -> str:
        lines = ["seed,consistency,alignment"]
        lines += [f"{s},{c:.6f},{a:.6f}" for s, c, a in zip(self.seeds, self.consistency, self.alignment)]
        for stat in ("mean", "std"):
            f = getattr(self, stat)
            lines.append(f"{stat},{f('consistency'):.6f},{f('alignment'):.6f}")
        lines.append(f"count,{self.count},{self.count}")
        return "\n".join(lines) + "\n"


def score_images(images: dict, specs) -> EvalReport:
    """``images`` maps spec seed -> H x W x 3 float image."""
    report = EvalReport()
    for spec in specs:
        img = images[spec.seed]
        report.add(spec.seed, garment_consistency(img, spec), text_alignment(img, spec))
    return report


# ---------------------------------------------------------------- generation


def noise_seed(sample_seed: int, spec_seed: int) -> int:
    return (sample_seed << 42) + spec_seed


@torch.no_grad()
def generate(model: GarmentFlow, specs, sample_seed: int, steps: int, batch: int = 128, garments=None) -> dict:
    """Sample one image per spec, batched by bucket; returns seed -> float32 image.

    ``garments`` optionally maps spec seed -> product image; by default the
    spec's own render is used.
    """
    model.eval()
    out = {}
    by_bucket: dict[str, list] = {}
    for s in specs:
        by_bucket.setdefault(s.bucket, []).append(s)
    for ratio, group in by_bucket.items():
        b = group[0].aspect
        for i in range(0, len(group), batch):
            chunk = group[i : i + batch]
            ids = torch.tensor([make_prompt(s) for s in chunk], dtype=torch.int64)
            g = torch.from_numpy(
                np.stack([garments[s.seed] if garments is not None else render_garment(s) for s in chunk])
            )
            c = model.condition(ids, g)
            imgs = euler_sample(model.velocity, c, b.height, b.width, steps, [noise_seed(sample_seed, s.seed) for s in chunk])
            for s, img in zip(chunk, imgs):
                out[s.seed] = img.numpy()
    return out


def evaluate(model: GarmentFlow, specs, sample_seed: int, steps: int) -> EvalReport:
    return score_images(generate(model, specs, sample_seed, steps), specs)


@torch.no_grad()
def validation_loss(model: GarmentFlow, data, seed: int = 0) -> float:
    """FM loss over a dataset at fixed (t, eps) draws."""
    gen = torch.Generator().manual_seed(seed)
    total, n = 0.0, 0
    for bd in data.buckets.values():
        t = torch.rand(len(bd.specs), generator=gen)
        eps = torch.randn(bd.scenes.shape, generator=gen)
        v = model(interpolate(bd.scenes, eps, t), t, bd.prompts, bd.garments)
        total += float(((v - (bd.scenes - eps)) ** 2).mean()) * len(bd.specs)
        n += len(bd.specs)
    return total / n


# ---------------------------------------------------------------- attention dump


@torch.no_grad()
def attention_weights(model: GarmentFlow, spec: SceneSpec, layer: int, head: int, t: float = 0.5, seed: int = 0):
    """Selective-attention weights (noise tokens x condition tokens) at time ``t``.

    The model input is the interpolant between the spec's ground-truth scene and
    seeded noise.
    """
    blocks = model.dit.blocks
    if not 0 <= layer < len(blocks):
        raise IndexError(f"layer {layer} out of range [0, {len(blocks)})")
    if not model.cfg.selective_attention:
        raise ValueError("model has no selective-attention branch")
    if not 0 <= head < model.cfg.heads:
        raise IndexError(f"head {head} out of range [0, {model.cfg.heads})")
    model.eval()
    z0 = torch.from_numpy(render_scene(spec))[None]
    eps = noise_like(z0.shape[1:], seed)[None]
    ids = torch.tensor([make_prompt(spec)], dtype=torch.int64)
    g = torch.from_numpy(render_garment(spec))[None]
    sel = blocks[layer].sel
    sel.keep_weights = True
    try:
        model(interpolate(z0, eps, t), torch.tensor([t]), ids, g)
        w = sel.last_weights[0, head].clone()
    finally:
        sel.keep_weights = False
        sel.last_weights = None
    return w


def dump_attention(model: GarmentFlow, spec: SceneSpec, layer: int, head: int, out_dir, t: float = 0.5, seed: int = 0):
    """Write ``attn_l{layer}_h{head}.csv`` and a row-normalized P5 heatmap; returns the matrix."""
    w = attention_weights(model, spec, layer, head, t, seed).double().numpy()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"attn_l{layer}_h{head}"
    csv = "\n".join(",".join(repr(float(x)) for x in row) for row in w) + "\n"
    atomic_write_bytes(out / f"{stem}.csv", csv.encode())
    peak = w.max(axis=1, keepdims=True)
    heat = np.where(peak > 0, w / np.where(peak > 0, peak, 1.0), 0.0)
    write_pgm(out / f"{stem}.pgm", heat)
    return w


# ---------------------------------------------------------------- ablation


@dataclass(frozen=True)
class Cell:
    name: str
    overrides: tuple = ()


def _cell(name, **kw) -> Cell:
    return Cell(name, tuple(sorted(kw.items())))


def _modules(ma: bool, sa: bool, er: bool, **extra) -> dict:
    return dict(
        masked_attention=ma,
        selective_attention=sa,
        refiner="fusion" if er else "none",
        strategy="top-k" if sa else "full",
        strategy_k=8,
        **extra,
    )


BASELINE = _modules(False, False, False)
UMC = _modules(True, True, True)

GRIDS: dict[str, list[Cell]] = {
    "umc-vs-baseline": [_cell("baseline", **BASELINE), _cell("umc", **UMC)],
    "modules": [
        _cell("baseline", **BASELINE),
        _cell("+MA", **_modules(True, False, False)),
        _cell("+SA", **_modules(False, True, False)),
        _cell("+ER", **_modules(False, False, True)),
        _cell("+SA+MA", **_modules(True, True, False)),
        _cell("+ER+MA", **_modules(True, False, True)),
        _cell("+ER+SA", **_modules(False, True, True)),
        _cell("umc", **UMC),
    ],
    "refiner": [
        _cell(f"refiner={v}", **{**UMC, "refiner": v}) for v in ("none", "mlp", "joint", "parallel", "fusion")
    ],
    "strategy": [
        _cell("w/o SA", **{**UMC, "selective_attention": False}),
        _cell("full", **{**UMC, "strategy": "full"}),
        *(_cell(f"top-k{k}", **{**UMC, "strategy_k": k}) for k in (4, 8, 16, 32)),
        _cell("top-p", **{**UMC, "strategy": "top-p", "strategy_p": 0.2}),
        _cell("top-p-tau", **{**UMC, "strategy": "top-p-tau", "strategy_p": 0.2, "strategy_tau": 0.8}),
        _cell("top-pk", **{**UMC, "strategy": "top-pk", "strategy_p": 0.2, "strategy_k": 8}),
    ],
    "topk": [
        _cell(f"k={k}{' w/ ER' if er else ''}", **{**_modules(True, True, er), "strategy_k": k})
        for er in (False, True)
        for k in (4, 8, 16, 32)
    ],
}


def parse_grid_file(path) -> list[Cell]:
    """One cell per line: ``name: key=value, key=value``."""
    cells = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        name, _, rest = line.partition(":")
        kw = {}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            k, _, v = item.partition("=")
            kw[k.strip()] = v.strip()
        cells.append(Cell(name.strip(), tuple(sorted(kw.items()))))
    return cells


def budget_plan(steps: int) -> str:
    """Refiner-only for the first tenth, then everything."""
    first = steps // 10
    return f"refiner:{first},all:{steps - first}"


@dataclass
class AblationRow:
    cell: str
    seed: int
    consistency: float = math.nan
    alignment: float = math.nan
    final_loss: float = math.nan
    status: str = "ok"


RESULTS_HEADER = "cell,seed,mean_consistency,mean_alignment,final_loss,status"


def format_results(rows) -> str:
    lines = [RESULTS_HEADER]
    for r in rows:
        status = r.status.replace(",", ";").replace("\n", " ")
        lines.append(f"{r.cell},{r.seed},{r.consistency:.6f},{r.alignment:.6f},{r.final_loss:.6f},{status}")
    return "\n".join(lines) + "\n"


def _cell_config(base: RunConfig, cell: Cell, seed: int, steps: int) -> RunConfig:
    values = dict(line.split(" = ", 1) for line in base.serialize().splitlines())
    values.update((k, _fmt(v)) for k, v in cell.overrides)
    values.update(init_seed=str(seed), train_seed=str(seed), sample_seed=str(seed), stage_plan=budget_plan(steps))
    return RunConfig.parse("\n".join(f"{k} = {v}" for k, v in values.items()), f"cell {cell.name}")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def run_cell(base: RunConfig, cell: Cell, seed: int, steps: int, manifest, eval_size: int) -> AblationRow:
    from .training import BucketedDataset, eval_seeds, train
    from .worldgen import spec_from_seed

    row = AblationRow(cell.name, seed)
    try:
        cfg = _cell_config(base, cell, seed, steps)
        data = BucketedDataset.from_manifest(manifest)
        res = train(cfg, data)
        specs = [spec_from_seed(s) for s in eval_seeds(eval_size)]
        rep = evaluate(res.model, specs, cfg.sample_seed, cfg.sampler_steps)
        row.consistency = rep.mean("consistency")
        row.alignment = rep.mean("alignment")
        row.final_loss = res.final_loss
    except Exception as e:  # one bad cell must not stop the grid
        log.error("cell %s seed %d failed: %s", cell.name, seed, e)
        log.debug(traceback.format_exc())
        row.status = f"failed: {type(e).__name__}: {e}"
    return row


def ablation_run(base: RunConfig, cells, seeds, steps: int, manifest, eval_size: int | None = None, jobs: int = 1):
    """Train and evaluate every (cell, seed); rows come back in grid order."""
    eval_size = eval_size or base.eval_size
    work = [(base, c, s, steps, str(manifest), eval_size) for c in cells for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(run_cell, *zip(*work)))
    return [run_cell(*w) for w in work]
