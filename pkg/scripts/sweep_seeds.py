"""Run one experiment config over several seed offsets and tabulate final losses.

    python scripts/sweep_seeds.py scripts/configs/ridge_ordering.json --seeds 20
"""
import argparse
import csv
import sys

import numpy as np

from oafl_cran.harness import ExperimentConfig, build_problem, run_experiment


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--first", type=int, default=0, help="first seed offset")
    args = p.parse_args(argv)
    base = ExperimentConfig.from_json(args.config)
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["offset", *base.schemes, "optimum"])
    finals = []
    for off in range(args.first, args.first + args.seeds):
        cfg = base.with_seed_offset(off)
        res = run_experiment(cfg)
        row = [res.final_loss(s) for s in cfg.schemes]
        finals.append(row)
        opt = build_problem(cfg).optimum_loss
        out.writerow([off, *(f"{x:.6g}" for x in row), "" if opt is None else f"{opt:.6g}"])
        sys.stdout.flush()
    mean = np.mean(finals, axis=0)
    se = np.std(finals, axis=0, ddof=1) / np.sqrt(len(finals)) if len(finals) > 1 else np.zeros_like(mean)
    out.writerow(["mean", *(f"{x:.6g}" for x in mean), ""])
    out.writerow(["stderr", *(f"{x:.3g}" for x in se), ""])


if __name__ == "__main__":
    main()
