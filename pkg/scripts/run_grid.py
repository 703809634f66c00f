#!/usr/bin/env python3
"""Run ``nnwm train`` for every config in a directory over several seeds and
build the consolidated report.

    python3 scripts/run_grid.py scripts/configs --seeds 0 1 2 --out runs/
"""

import argparse
import logging
import sys
from pathlib import Path

from nnwm.cli import main as nnwm

log = logging.getLogger("run_grid")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config_dir")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--out", default="runs")
    p.add_argument("--pattern", default="desk_*.json")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    failed = 0
    for cfg in sorted(Path(args.config_dir).glob(args.pattern)):
        for seed in args.seeds:
            out = Path(args.out) / cfg.stem / f"seed{seed}"
            code = nnwm(["train", "--config", str(cfg), "--seed", str(seed), "--out", str(out)])
            if code:
                log.error("%s seed %d exited with %d", cfg.name, seed, code)
                failed += 1
    nnwm(["report", args.out])
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
