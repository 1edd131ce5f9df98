"""Seed-averaged optimality gap against the reported convergence bound.

    python scripts/bound_check.py scripts/configs/ridge_bound.json --seeds 20
"""
import argparse

import numpy as np

from oafl_cran.harness import ExperimentConfig, build_problem, run_experiment


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--seeds", type=int, default=20)
    args = p.parse_args(argv)
    base = ExperimentConfig.from_json(args.config)
    if base.task != "ridge":
        raise SystemExit("the bound needs the ridge task")
    gaps, bounds = [], []
    for off in range(args.seeds):
        cfg = base.with_seed_offset(off)
        opt = build_problem(cfg).optimum_loss
        recs = run_experiment(cfg).scheme_records(cfg.schemes[0])
        gaps.append([r.train_loss - opt for r in recs])
        bounds.append([r.bound - opt for r in recs])
    gap, bound = np.mean(gaps, axis=0), np.mean(bounds, axis=0)
    print("round,gap,bound")
    for t, (g, b) in enumerate(zip(gap, bound), 1):
        print(f"{t},{g:.6g},{b:.6g}")
    print(f"# rounds with gap > bound: {int(np.sum(gap > bound))}")


if __name__ == "__main__":
    main()
