"""Run the full pipeline for several seeds and compare the seed-averaged metrics.

    python3 scripts/run_seeds.py --seeds 0 1 --out runs/desk
"""

import argparse
import logging
import time
from pathlib import Path

from safeskills import harness
from safeskills.config import build_config, load_config


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--config", default=None)
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument("--out", default="runs/desk")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    for seed in args.seeds:
        if args.config:
            cfg = load_config(args.config, preset=args.preset, seed=seed)
        else:
            cfg = build_config(preset=args.preset, seed=seed)
        root = out / f"seed_{seed}"
        start = time.process_time()
        harness.run_pipeline(cfg, root)
        seconds = time.process_time() - start
        (root / "pipeline_seconds.txt").write_text(f"{seconds:.1f}\n")
        print(f"seed {seed}: pipeline {seconds:.0f}s CPU")

    report = harness.cmd_compare(out)
    for name, va, vb, holds in report["checks"]:
        state = {1: "holds", 0: "violated", "": "n/a"}[holds]
        print(f"{state:9s} {name}  ({va} vs {vb})")


if __name__ == "__main__":
    main()
