#!/usr/bin/env python3
"""Run the desk-scale experiments and write one JSON file per experiment.

    python3 scripts/run_desk.py all --out results/
    python3 scripts/run_desk.py pruning --seeds 0 1 --out results/
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from nnwm import experiments as ex

log = logging.getLogger("run_desk")

EXPERIMENTS = ("fidelity", "key-kinds", "capacity", "posthoc", "pruning", "finetune", "overwrite")


def run(name, seeds, args):
    if name == "fidelity":
        return ex.fidelity(seeds)
    if name == "key-kinds":
        return {str(lam): ex.key_kinds(seeds, lam) for lam in args.key_lambdas}
    if name == "capacity":
        return {str(s): ex.capacity(s) for s in seeds}
    if name == "posthoc":
        return ex.posthoc_sweep(seeds)
    if name == "pruning":
        alphas = np.round(np.arange(0, 1.0001, 0.05), 2).tolist() + [0.65]
        return [{"alpha": a, "order": o, **v} for (a, o), v in ex.pruning(seeds, sorted(set(alphas))).items()]
    if name == "finetune":
        return ex.finetune(seeds)
    if name == "overwrite":
        # mini-wide layers of increasing size; the larger M the more room for both keys
        desk = ex.Desk(preset="mini-wide", epochs=args.overwrite_epochs)
        return [ex.overwrite(s, layer, desk=desk) for layer in ("conv2b", "conv3b", "conv4b") for s in seeds]
    raise ValueError(name)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("experiment", choices=EXPERIMENTS + ("all",))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--key-lambdas", type=float, nargs="+", default=[ex.DEFAULT_LAMBDA, 0.3])
    p.add_argument("--overwrite-epochs", type=int, default=8)
    p.add_argument("--out", default="results")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in EXPERIMENTS if args.experiment == "all" else (args.experiment,):
        t0 = time.perf_counter()
        result = run(name, args.seeds, args)
        path = out / f"{name}.json"
        path.write_text(json.dumps(result, indent=2, sort_keys=True, default=float) + "\n")
        log.info("%s done in %.0fs -> %s", name, time.perf_counter() - t0, path)


if __name__ == "__main__":
    main()
