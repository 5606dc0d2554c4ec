"""Command-line entry point: ``garmentflow <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 5 a check or ablation cell failed.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import logging
import sys
from pathlib import Path

import torch

from . import checkpoint
from .backbone import build_model, euler_sample
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .diffcore import ShapeError
from .imageio import atomic_write_bytes, read_ppm, write_ppm
from .training import DataError, NumericFailure
from .worldgen import BACKGROUNDS, BUCKET_BY_RATIO, POSES, prompt_tokens, spec_from_seed, to_float

log = logging.getLogger("garmentflow")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4, 5


def load_config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def new_run_dir(cfg: RunConfig, out=None, kind: str = "run") -> Path:
    """Fresh directory; an existing non-empty directory is never reused."""
    if out is None:
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        base = cfg.resolved_out_root() / f"{kind}-{cfg.hash()}-{stamp}"
        out, n = base, 1
        while out.exists():
            out = base.with_name(f"{base.name}-{n}")
            n += 1
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        raise ConfigError(f"run directory {out} is not empty; completed runs are never overwritten")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out}: {e.strerror}") from None
    return out


def config_for_checkpoint(args) -> RunConfig:
    if args.config:
        return RunConfig.load(args.config)
    sidecar = Path(args.checkpoint).parent / "config.cfg"
    if not sidecar.is_file():
        raise ConfigError(f"no --config given and no config.cfg next to {args.checkpoint}")
    return RunConfig.load(sidecar)


def load_model(args):
    cfg = config_for_checkpoint(args)
    torch.set_num_threads(cfg.threads)
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model = build_model(cfg.dit_config(), cfg.init_seed)
    checkpoint.load_into(model, args.checkpoint)
    model.eval()
    return cfg, model


# ---------------------------------------------------------------- commands


def cmd_generate_data(args) -> int:
    from .training import generate_data

    cfg = load_config(args.config)
    count = args.count if args.count is not None else cfg.dataset_size
    seed = args.seed if args.seed is not None else cfg.data_seed
    out = args.out or cfg.resolved_out_root() / f"data-{seed}-{count}"
    manifest = generate_data(out, count, seed, cfg.bucket_list)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import BucketedDataset, check_dataset, train

    cfg = load_config(args.config)
    if args.steps is not None:
        from .evalkit import budget_plan

        cfg = cfg.replace(stage_plan=budget_plan(args.steps))
    if args.seed is not None:
        cfg = cfg.replace(init_seed=args.seed, train_seed=args.seed)
    if not args.manifest:
        raise ConfigError("train needs --manifest")
    data = BucketedDataset.from_manifest(args.manifest)
    check_dataset(cfg, data)
    run_dir = new_run_dir(cfg, args.out, "train")
    cfg.save(run_dir / "config.cfg")
    res = train(cfg, data, run_dir)
    print(run_dir)
    log.info("final loss %.5f", res.final_loss)
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg, model = load_model(args)
    bucket = args.bucket or "1:1"
    if bucket not in BUCKET_BY_RATIO:
        raise ConfigError(f"unknown bucket {bucket!r}; choose from {list(BUCKET_BY_RATIO)}")
    if args.background not in BACKGROUNDS or args.pose not in POSES:
        raise ConfigError(f"background must be one of {BACKGROUNDS}, pose one of {POSES}")
    if args.garment:
        try:
            garment = to_float(read_ppm(args.garment))
        except (OSError, ValueError) as e:
            raise DataError(f"cannot read garment image {args.garment}: {e}") from None
    else:
        from .worldgen import render_garment

        garment = render_garment(spec_from_seed(args.garment_seed))
    b = BUCKET_BY_RATIO[bucket]
    ids = torch.tensor([prompt_tokens(args.background, args.pose, bucket)], dtype=torch.int64)
    with torch.no_grad():
        c = model.condition(ids, torch.from_numpy(garment)[None])
    steps = args.steps or cfg.sampler_steps
    seed = args.seed if args.seed is not None else cfg.sample_seed
    img = euler_sample(model.velocity, c, b.height, b.width, steps, [seed])[0].numpy()
    out = Path(args.out or "sample.ppm")
    write_ppm(out, img)
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalkit import evaluate, generate, score_images
    from .training import eval_seeds, read_manifest, record_spec

    if args.manifest:
        specs = [record_spec(r) for r in read_manifest(args.manifest)]
    else:
        cfg0 = load_config(args.config)
        count = args.count or cfg0.eval_size
        specs = [spec_from_seed(s) for s in eval_seeds(count)]
    if args.generated:
        images = {}
        for s in specs:
            path = Path(args.generated) / f"{s.seed}.ppm"
            if not path.is_file():
                raise DataError(f"missing generated image {path}")
            images[s.seed] = to_float(read_ppm(path))
        report = score_images(images, specs)
        out = Path(args.out) if args.out else Path(args.generated)
    elif args.checkpoint:
        cfg, model = load_model(args)
        steps = args.steps or cfg.sampler_steps
        seed = args.seed if args.seed is not None else cfg.sample_seed
        out = new_run_dir(cfg, args.out, "eval")
        images = generate(model, specs, seed, steps)
        (out / "images").mkdir(exist_ok=True)
        for s in specs:
            write_ppm(out / "images" / f"{s.seed}.ppm", images[s.seed])
        # score the 8-bit files, the same pixels a later --generated eval sees
        report = score_images({s.seed: to_float(read_ppm(out / "images" / f"{s.seed}.ppm")) for s in specs}, specs)
    else:
        raise ConfigError("eval needs --checkpoint or --generated")
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "eval.csv", report.to_csv().encode())
    print(f"consistency {report.mean('consistency'):.6f} alignment {report.mean('alignment'):.6f} n={report.count}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evalkit import GRIDS, ablation_run, format_results, parse_grid_file

    cfg = load_config(args.config)
    if not args.manifest:
        raise ConfigError("ablate needs --manifest")
    if not Path(args.manifest).is_file():
        raise DataError(f"manifest not found: {args.manifest}")
    if args.grid in GRIDS:
        cells = GRIDS[args.grid]
    elif Path(args.grid).is_file():
        cells = parse_grid_file(args.grid)
    else:
        raise ConfigError(f"unknown grid {args.grid!r}; built-in grids: {sorted(GRIDS)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    steps = args.steps or sum(s.steps for s in cfg.stages)
    out = new_run_dir(cfg, args.out, "ablate")
    rows = ablation_run(cfg, cells, seeds, steps, args.manifest, args.count, args.jobs)
    text = format_results(rows)
    atomic_write_bytes(out / "results.csv", text.encode())
    sys.stdout.write(text)
    return EXIT_CHECK if any(r.status != "ok" for r in rows) else EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_all

    reports = run_all(tol=args.tol, seed=args.seed if args.seed is not None else 0)
    text = "\n".join(str(r) for r in reports) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(Path(args.out) / "gradcheck.txt", text.encode())
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_viz_attn(args) -> int:
    from .evalkit import dump_attention

    from .training import eval_seeds

    cfg, model = load_model(args)
    index = args.seed if args.seed is not None else 0
    spec = spec_from_seed(eval_seeds(index + 1)[index])
    out = Path(args.out or "attn")
    w = dump_attention(model, spec, args.layer, args.head, out, t=args.t, seed=cfg.sample_seed)
    nz = (w > 0).sum(axis=1)
    print(f"{out}: {w.shape[0]} noise x {w.shape[1]} condition tokens, nonzero per row {nz.min()}..{nz.max()}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="garmentflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="key = value run configuration file")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("generate-data", cmd_generate_data, "write a procedural dataset (PPM images + manifest.jsonl)")
    sp.add_argument("--count", type=int)

    sp = add("train", cmd_train, "run the stage plan on a manifest")
    sp.add_argument("--manifest")
    sp.add_argument("--steps", type=int, help="override the stage plan with a 1:9 split of this many steps")

    sp = add("sample", cmd_sample, "generate one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--garment", help="16x16 P6 product image; defaults to the render of --garment-seed")
    sp.add_argument("--garment-seed", type=int, default=0)
    sp.add_argument("--background", default="studio", choices=BACKGROUNDS)
    sp.add_argument("--pose", default="standing", choices=POSES)
    sp.add_argument("--bucket", choices=list(BUCKET_BY_RATIO))
    sp.add_argument("--steps", type=int)

    sp = add("eval", cmd_eval, "score generations with the consistency/alignment proxies")
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest", help="specs to evaluate; default is the held-out set")
    sp.add_argument("--generated", help="directory of <seed>.ppm images to score instead of sampling")
    sp.add_argument("--count", type=int)
    sp.add_argument("--steps", type=int)

    sp = add("ablate", cmd_ablate, "train and evaluate a grid of configurations")
    sp.add_argument("--manifest")
    sp.add_argument("--grid", default="umc-vs-baseline", help="built-in grid name or a grid file")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--steps", type=int, help="steps per run")
    sp.add_argument("--count", type=int, help="held-out evaluation specs")
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every op and a tiny model")
    sp.add_argument("--tol", type=float, default=1e-3)

    sp = add("viz-attn", cmd_viz_attn, "dump selective-attention weights for held-out spec number --seed")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--layer", type=int, default=0)
    sp.add_argument("--head", type=int, default=0)
    sp.add_argument("--t", type=float, default=0.5)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShapeError, IndexError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
