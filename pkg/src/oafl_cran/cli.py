"""Command-line entry point.

Subcommands ``run``, ``optimize``, ``rd-check`` and ``train-codec`` each read
one JSON config; see the README for the config keys of each.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import codec
from .errors import ConfigError, OaflError
from .harness import ExperimentConfig, SeedConfig, optimize_frozen_round, run_experiment
from .ldsc import SourceStats, rd_feasible

log = logging.getLogger("oafl_cran")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _experiment_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(_read_json(args.config))
    if args.seed_override is not None:
        cfg = replace(cfg, seeds=SeedConfig().shifted(args.seed_override))
    return cfg


def _write(out, name, payload) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    target = path / name
    target.write_text(payload if isinstance(payload, str) else json.dumps(payload, indent=1, sort_keys=True))
    return target


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    result = run_experiment(cfg)
    result.write(args.out)
    for scheme in cfg.schemes:
        log.info("%s: final train loss %.6g", scheme, result.final_loss(scheme))
    return 0


def cmd_optimize(args) -> int:
    trace = optimize_frozen_round(_experiment_config(args))
    _write(args.out, "trace.json", trace)
    log.info("D_system %.6g after %d sweeps", trace["objective"][-1], len(trace["sweeps"]))
    return 0


def cmd_rd_check(args) -> int:
    d = _read_json(args.config)
    missing = {"sigma_s", "sigma_v", "rates"} - set(d)
    if missing:
        raise ConfigError(f"rd-check config lacks {sorted(missing)}")
    rep = rd_feasible(SourceStats(np.asarray(d["sigma_s"], dtype=float),
                                  np.asarray(d["sigma_v"], dtype=float), d["rates"]))
    out = rep.to_dict()
    if not rep.feasible:
        out["tightest"] = list(rep.tightest)
    text = json.dumps(out, indent=1, sort_keys=True)
    if args.out:
        _write(args.out, "rd_check.json", text)
    print(text)
    return 0 if rep.feasible else 1


def cmd_train_codec(args) -> int:
    d = _read_json(args.config)
    missing = {"sigma_s", "c", "n"} - set(d)
    if missing:
        raise ConfigError(f"train-codec config lacks {sorted(missing)}")
    sigma_s = np.asarray(d["sigma_s"], dtype=float)
    n_ap = sigma_s.shape[0]
    seed = int(d.get("seed", 0) if args.seed_override is None else args.seed_override)
    sigma = float(d.get("sigma", 1.0))
    rates = np.broadcast_to(np.asarray(d.get("rates", 1.0), dtype=float), (n_ap,))
    a_mat = codec.compression_matrix(int(d["n"]), sigma, np.random.default_rng([seed, 7]))
    states = [codec.EncoderState.create(int(d["n"]), sigma, r, a_mat) for r in rates]
    keys = ("layers", "hidden", "epochs", "lr", "lr_growth", "n_vectors", "zero_side", "feedback")
    arch = codec.TrainConfig(**{k: d[k] for k in keys if k in d})
    weights = codec.train_decoder(sigma_s, d["c"], states, arch, seed=np.random.default_rng([seed, 1]))
    held_out = codec.fusion_mse(weights, sigma_s, d["c"], states, arch.n_vectors,
                                np.random.default_rng([seed, 2]))
    _write(args.out, "decoder.json", weights.to_json())
    _write(args.out, "trace.json", {"loss": weights.history, "held_out_mse": held_out})
    log.info("held-out normalized fusion MSE %.6g", held_out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oafl-cran", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, out_required in (("run", cmd_run, True), ("optimize", cmd_optimize, True),
                                   ("rd-check", cmd_rd_check, False),
                                   ("train-codec", cmd_train_codec, True)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed-override", type=int, default=None,
                        help="replace the config's seeds with ones derived from this value")
        sp.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed_override is not None and args.seed_override < 0:
        print("error: --seed-override must be non-negative", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except OaflError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
