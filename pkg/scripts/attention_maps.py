"""Dump selective-attention maps of one checkpoint under several top-k settings.

The checkpoint's own k is replaced at inference time, so the maps show which
condition tokens each noise token keeps as k grows.
"""
import argparse
from dataclasses import replace
from pathlib import Path

from garmentflow import checkpoint
from garmentflow.backbone import build_model
from garmentflow.config import RunConfig
from garmentflow.evalkit import dump_attention
from garmentflow.selattn import SelectiveAttention
from garmentflow.training import eval_seeds
from garmentflow.worldgen import spec_from_seed


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="defaults to config.cfg next to the checkpoint")
    p.add_argument("--ks", default="4,8,16,32")
    p.add_argument("--specs", type=int, default=3, help="held-out specs to dump")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--out", default="attn-maps")
    args = p.parse_args()

    cfg = RunConfig.load(args.config or Path(args.checkpoint).parent / "config.cfg")
    model = build_model(cfg.dit_config(), cfg.init_seed)
    checkpoint.load_into(model, args.checkpoint)
    model.eval()
    sel = [m for m in model.modules() if isinstance(m, SelectiveAttention)]
    if not sel:
        raise SystemExit("checkpoint has no selective attention")
    for k in (int(x) for x in args.ks.split(",")):
        for m in sel:
            m.strategy = replace(m.strategy, kind="top-k", k=k)
        for seed in eval_seeds(args.specs):
            out = Path(args.out) / f"k{k}" / str(seed)
            w = dump_attention(model, spec_from_seed(seed), args.layer, args.head, out, seed=cfg.sample_seed)
            print(f"k={k} spec {seed}: {w.shape[0]}x{w.shape[1]}, nonzero per row {(w > 0).sum(1).max()}")


if __name__ == "__main__":
    main()
