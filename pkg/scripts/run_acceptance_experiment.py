"""Train on 8 synthetic maps and measure the synthetic acceptance experiments.

Writes results.json, metrics.jsonl and checkpoints to the output directory.

    python3 scripts/run_acceptance_experiment.py --out results/acceptance
"""
import argparse
import json
import logging
import time
from dataclasses import replace

from pointiso.experiment import ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/acceptance")
    ap.add_argument("--epochs", type=int, default=None, help="detecting epochs")
    ap.add_argument("--grouping-epochs", type=int, default=None)
    ap.add_argument("--train-maps", type=int, default=8)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = ExperimentConfig()
    cfg = replace(cfg, train_seeds=tuple(range(1, args.train_maps + 1)))
    if args.epochs is not None:
        cfg = replace(cfg, training=replace(cfg.training, epochs=args.epochs))
    if args.grouping_epochs is not None:
        cfg = replace(cfg, grouping_epochs=args.grouping_epochs)
    t0 = time.time()
    res = run_experiment(cfg, args.out)
    res.pop("config")
    print(json.dumps(res, indent=2))
    print(f"total {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
