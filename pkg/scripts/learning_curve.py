"""Garment-consistency and alignment proxies every --every steps for two grid cells.

Training continues from the previous segment's weights; the optimizer state is
reset at each segment boundary, so the curve is a diagnostic, not a replica of
one uninterrupted run.
"""
import argparse
import time

from garmentflow.config import RunConfig
from garmentflow.evalkit import GRIDS, _cell_config, evaluate
from garmentflow.training import BucketedDataset, eval_seeds, generate_data, train
from garmentflow.worldgen import spec_from_seed


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--manifest", help="defaults to a fresh 2000-sample dataset under --out")
    p.add_argument("--out", default="runs/curve")
    p.add_argument("--grid", default="umc-vs-baseline", choices=sorted(GRIDS))
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--every", type=int, default=1000)
    p.add_argument("--eval-count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    manifest = args.manifest or generate_data(f"{args.out}/data", 2000)
    data = BucketedDataset.from_manifest(manifest)
    specs = [spec_from_seed(s) for s in eval_seeds(args.eval_count)]
    for cell in GRIDS[args.grid]:
        model = None
        for k in range(args.steps // args.every):
            cfg = _cell_config(RunConfig(), cell, args.seed, args.every)
            if k:
                cfg = cfg.replace(stage_plan=f"all:{args.every}", train_seed=args.seed + k)
            t0 = time.perf_counter()
            res = train(cfg, data, model=model)
            model = res.model
            rep = evaluate(model, specs, cfg.sample_seed, cfg.sampler_steps)
            print(
                f"{cell.name} step {(k + 1) * args.every} {time.perf_counter() - t0:.0f}s loss {res.final_loss:.4f}"
                f" consistency {rep.mean('consistency'):.4f} alignment {rep.mean('alignment'):.4f}",
                flush=True,
            )


if __name__ == "__main__":
    main()
