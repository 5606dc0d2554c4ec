"""Manifests, bucketed batches, and the staged flow-matching training loop."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .backbone import GarmentFlow, build_model, fm_loss, interpolate, is_refiner_param
from .config import ConfigError, RunConfig
from .imageio import atomic_write_bytes, read_ppm, write_ppm
from .worldgen import (
    BUCKET_BY_RATIO,
    EVAL_SEED_BASE,
    SceneSpec,
    make_prompt,
    render_garment_u8,
    render_scene_u8,
    spec_from_seed,
    to_float,
)

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


class DataError(ValueError):
    pass


class NumericFailure(FloatingPointError):
    pass


# ---------------------------------------------------------------- manifests


def data_seeds(data_seed: int, count: int) -> range:
    """Consecutive seeds, so buckets (seed % 3) are exactly stratified."""
    base = data_seed << 24
    if data_seed < 0 or count > 1 << 24 or base + count > EVAL_SEED_BASE:
        raise ConfigError(f"data_seed {data_seed} would overlap the held-out seed range")
    return range(base, base + count)


def eval_seeds(count: int) -> list[int]:
    return list(range(EVAL_SEED_BASE, EVAL_SEED_BASE + count))


def generate_data(out_dir, count: int, data_seed: int = 0, buckets=None) -> Path:
    """Write PPM pairs plus ``manifest.jsonl``; returns the manifest path.

    With ``buckets`` given, seeds outside those buckets are skipped until
    ``count`` records exist.
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out}: {e.strerror}") from None
    allowed = set(buckets) if buckets else None
    records = []
    seed_iter = iter(data_seeds(data_seed, 1 << 24))
    while len(records) < count:
        spec = spec_from_seed(next(seed_iter))
        if allowed is not None and spec.bucket not in allowed:
            continue
        g_rel = f"images/garment_{spec.seed}.ppm"
        s_rel = f"images/scene_{spec.seed}.ppm"
        write_ppm(out / g_rel, render_garment_u8(spec))
        write_ppm(out / s_rel, render_scene_u8(spec))
        records.append({**spec.to_dict(), "garment": g_rel, "scene": s_rel})
    manifest = out / MANIFEST_NAME
    atomic_write_bytes(manifest, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode())
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            SceneSpec(**{k: rec[k] for k in ("shape", "color", "pattern", "background", "pose", "bucket", "seed")})
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"{path}:{lineno}: bad record ({e})") from None
        if rec["bucket"] not in BUCKET_BY_RATIO:
            raise DataError(f"{path}:{lineno}: unknown bucket {rec['bucket']!r}")
        records.append(rec)
    if not records:
        raise DataError(f"{path}: manifest is empty")
    return records


def record_spec(rec: dict) -> SceneSpec:
    return SceneSpec(**{k: rec[k] for k in ("shape", "color", "pattern", "background", "pose", "bucket", "seed")})


@dataclass
class BucketData:
    garments: torch.Tensor  # [N, 16, 16, 3]
    prompts: torch.Tensor  # [N, 4] int64
    scenes: torch.Tensor  # [N, H, W, 3]
    specs: list = field(default_factory=list)


class BucketedDataset:
    """Samples grouped by aspect bucket; a batch never mixes buckets."""

    def __init__(self, specs, garments, scenes):
        groups: dict[str, list[int]] = {}
        for i, s in enumerate(specs):
            groups.setdefault(s.bucket, []).append(i)
        self.buckets: dict[str, BucketData] = {}
        for ratio in sorted(groups, key=lambda r: [b for b in BUCKET_BY_RATIO].index(r)):
            idx = groups[ratio]
            self.buckets[ratio] = BucketData(
                torch.from_numpy(np.stack([garments[i] for i in idx])),
                torch.tensor([make_prompt(specs[i]) for i in idx], dtype=torch.int64),
                torch.from_numpy(np.stack([scenes[i] for i in idx])),
                [specs[i] for i in idx],
            )

    @classmethod
    def from_manifest(cls, path) -> "BucketedDataset":
        root = Path(path).parent
        recs = read_manifest(path)
        specs, garments, scenes = [], [], []
        for rec in recs:
            spec = record_spec(rec)
            try:
                g = read_ppm(root / rec["garment"])
                s = read_ppm(root / rec["scene"])
            except (OSError, ValueError) as e:
                raise DataError(f"cannot read images for seed {spec.seed}: {e}") from None
            b = spec.aspect
            if g.shape != (16, 16, 3) or s.shape != (b.height, b.width, 3):
                raise DataError(f"seed {spec.seed}: image shapes {g.shape}, {s.shape} do not match bucket {spec.bucket}")
            specs.append(spec)
            garments.append(to_float(g))
            scenes.append(to_float(s))
        return cls(specs, garments, scenes)

    @classmethod
    def from_seeds(cls, seeds) -> "BucketedDataset":
        specs = [spec_from_seed(s) for s in seeds]
        return cls(
            specs,
            [to_float(render_garment_u8(s)) for s in specs],
            [to_float(render_scene_u8(s)) for s in specs],
        )

    def __len__(self):
        return sum(len(b.specs) for b in self.buckets.values())


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: GarmentFlow
    rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.rows[-1]["loss"] if self.rows else float("nan")


METRICS_HEADER = "step,stage,loss,lr,seconds\n"


def format_metrics(rows) -> str:
    return METRICS_HEADER + "".join(
        f"{r['step']},{r['stage']},{r['loss']:.8g},{r['lr']:g},{r['seconds']:.3f}\n" for r in rows
    )


def trainable_names(model: torch.nn.Module, which: str) -> list[str]:
    names = [n for n, _ in model.named_parameters()]
    if which == "all":
        return names
    if which == "refiner":
        return [n for n in names if is_refiner_param(n)]
    raise ConfigError(f"unknown trainable set {which!r}")


def check_dataset(cfg: RunConfig, data: BucketedDataset) -> None:
    """The enabled buckets and the dataset's buckets must coincide."""
    for ratio in cfg.bucket_list:
        if ratio not in data.buckets:
            raise DataError(f"bucket {ratio} is enabled but has no training samples")
    unknown = set(data.buckets) - set(cfg.bucket_list)
    if unknown:
        raise DataError(f"dataset contains buckets {sorted(unknown)} not enabled in the config")
    if len(data) == 0:
        raise DataError("empty dataset")


def train(cfg: RunConfig, data: BucketedDataset, run_dir=None, model: GarmentFlow | None = None) -> TrainResult:
    """Run the stage plan; with ``run_dir`` set, write checkpoints and metrics.csv."""
    check_dataset(cfg, data)
    torch.set_num_threads(cfg.threads)
    if model is None:
        model = build_model(cfg.dit_config(), cfg.init_seed)
        if cfg.init_checkpoint:
            checkpoint.load_into(model, cfg.init_checkpoint)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.train_seed)
    gen = torch.Generator().manual_seed(cfg.train_seed)
    ratios = list(data.buckets)
    counts = np.array([len(data.buckets[r].specs) for r in ratios], dtype=np.float64)
    probs = counts / counts.sum()

    result = TrainResult(model)
    t_start = time.perf_counter()
    step = 0
    stages = cfg.stages
    for si, stage in enumerate(stages):
        if stage.steps == 0:
            continue
        names = set(trainable_names(model, stage.trainable))
        params = []
        for n, p in model.named_parameters():
            p.requires_grad_(n in names)
            if n in names:
                params.append(p)
        opt = None
        if params:
            opt = torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
        window = []
        for s in range(stage.steps):
            step += 1
            bd = data.buckets[ratios[rng.choice(len(ratios), p=probs)]]
            n = len(bd.specs)
            idx = torch.from_numpy(rng.choice(n, size=min(cfg.batch_size, n), replace=False))
            z0 = bd.scenes[idx]
            t = torch.rand(len(idx), generator=gen)
            eps = torch.randn(z0.shape, generator=gen)
            want_row = step % cfg.log_interval == 0 or s == stage.steps - 1
            if opt is None and not want_row:
                continue
            try:
                with torch.set_grad_enabled(opt is not None):
                    v = model(interpolate(z0, eps, t), t, bd.prompts[idx], bd.garments[idx])
                    loss = fm_loss(v, z0, eps)
            except FloatingPointError as e:
                raise NumericFailure(f"step {step} ({stage.name}): {e}") from None
            if not torch.isfinite(loss):
                raise NumericFailure(f"non-finite loss {loss.item()} at step {step} ({stage.name})")
            if opt is not None:
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
            window.append(loss.item())
            if want_row:
                row = {
                    "step": step,
                    "stage": si + 1,
                    "loss": float(np.mean(window)),
                    "lr": cfg.lr,
                    "seconds": time.perf_counter() - t_start if cfg.record_wallclock else 0.0,
                }
                result.rows.append(row)
                log.info("step %d stage %d loss %.5f", step, si + 1, row["loss"])
                window = []
        if run_dir is not None:
            name = "final.ckpt" if si == len(stages) - 1 else f"stage{si + 1}.ckpt"
            checkpoint.save_model(run_dir / name, model)
            result.checkpoints.append(run_dir / name)
    for p in model.parameters():
        p.requires_grad_(True)
    if run_dir is not None:
        if not any(c.name == "final.ckpt" for c in result.checkpoints):
            checkpoint.save_model(run_dir / "final.ckpt", model)
            result.checkpoints.append(run_dir / "final.ckpt")
        atomic_write_bytes(run_dir / "metrics.csv", format_metrics(result.rows).encode())
    return result
