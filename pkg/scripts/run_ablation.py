"""Train and score a built-in grid over several seeds, then print per-cell means.

    python scripts/run_ablation.py --grid modules --seeds 0,1,2 --steps 5000 --out runs/modules
"""
import argparse
import logging
import time
from collections import defaultdict
from pathlib import Path

import numpy as np

from garmentflow.config import RunConfig
from garmentflow.evalkit import GRIDS, ablation_run, format_results
from garmentflow.imageio import atomic_write_bytes
from garmentflow.training import MANIFEST_NAME, generate_data


def summarize(rows) -> str:
    by_cell = defaultdict(list)
    for r in rows:
        by_cell[r.cell].append(r)
    lines = ["cell,n_ok,mean_consistency,std_consistency,mean_alignment"]
    for cell, rs in by_cell.items():
        ok = [r for r in rs if r.status == "ok"]
        cons = np.array([r.consistency for r in ok])
        align = np.array([r.alignment for r in ok])
        if len(ok):
            lines.append(f"{cell},{len(ok)},{cons.mean():.4f},{cons.std():.4f},{align.mean():.4f}")
        else:
            lines.append(f"{cell},0,nan,nan,nan")
    return "\n".join(lines) + "\n"


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--grid", default="umc-vs-baseline", choices=sorted(GRIDS))
    p.add_argument("--config")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--count", type=int, default=2000, help="training samples")
    p.add_argument("--eval-count", type=int, default=200)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    out = Path(args.out)
    manifest = out / "data" / MANIFEST_NAME
    if not manifest.is_file():
        generate_data(out / "data", args.count, cfg.data_seed, cfg.bucket_list)
    seeds = [int(s) for s in args.seeds.split(",")]
    t0 = time.perf_counter()
    rows = ablation_run(cfg, GRIDS[args.grid], seeds, args.steps, manifest, args.eval_count, args.jobs)
    atomic_write_bytes(out / "results.csv", format_results(rows).encode())
    summary = summarize(rows)
    atomic_write_bytes(out / "summary.csv", summary.encode())
    print(summary, end="")
    print(f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
