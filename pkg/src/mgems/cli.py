"""Command-line entry points: run, sweep, plot, checkpoint, write-config.

Log verbosity comes from the MGEMS_LOG environment variable
(debug/info/warning; default warning).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from . import harness


def _setup_logging() -> None:
    level = os.environ.get("MGEMS_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load(args) -> config_mod.RunConfig:
    cfg = config_mod.load_config(getattr(args, "config", None))
    if getattr(args, "algo", None):
        cfg = dataclasses.replace(cfg, algorithm=args.algo)
    if getattr(args, "episodes", None):
        cfg = dataclasses.replace(cfg, episodes=args.episodes)
    if getattr(args, "seeds", None):
        cfg = dataclasses.replace(cfg, seeds=tuple(range(args.seeds)))
    if getattr(args, "seed_list", None):
        seeds = tuple(int(s) for s in args.seed_list.split(","))
        cfg = dataclasses.replace(cfg, seeds=seeds)
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    if getattr(args, "full_scale", False):
        cfg = config_mod.full_scale(cfg)
    return cfg


def _add_run_options(p, with_algo=True):
    if with_algo:
        p.add_argument("--algo", choices=config_mod.ALGORITHMS)
    p.add_argument("--config", help="config file (INI); defaults are embedded")
    p.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    p.add_argument("--seed-list", help="comma-separated explicit seeds")
    p.add_argument("--episodes", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--full-scale", action="store_true",
                   help="paper-scale schedule (10000 episodes, failures from 5000)")
    p.add_argument("--no-plots", action="store_true")


def cmd_run(args) -> int:
    cfg = _load(args)
    paths = harness.run_experiment(cfg, make_plots=not args.no_plots)
    if args.save_checkpoint:
        seed = cfg.seeds[-1]
        rows, components = harness.run_seed(cfg, seed, keep_components=True)
        del rows
        harness.save_checkpoint(args.save_checkpoint, cfg,
                                components["learners"], cfg.episodes,
                                components["rngs"])
        print(f"checkpoint written to {args.save_checkpoint}")
    print(f"aggregate: {paths['aggregate']}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    values = [float(v) for v in args.values.split(",")]
    paths = harness.sweep_experiment(cfg, args.param, values,
                                     make_plots=not args.no_plots)
    print(f"sweep summary: {paths['summary']}")
    with open(paths["report"]) as fh:
        sys.stdout.write(fh.read())
    return 0


def cmd_plot(args) -> int:
    import csv

    made = []
    for name in sorted(os.listdir(args.indir)):
        if not name.endswith("_aggregate.csv"):
            continue
        algo = name[:-len("_aggregate.csv")]
        with open(os.path.join(args.indir, name)) as fh:
            reader = csv.DictReader(fh)
            aggregate = [{k: float(v) for k, v in row.items()} for row in reader]
        for entry in aggregate:
            entry["episode"] = int(entry["episode"])
        made += harness.plot_aggregate(aggregate, algo, args.indir)
    if not made:
        print(f"no *_aggregate.csv files found in {args.indir}", file=sys.stderr)
        return 1
    for path in made:
        print(path)
    return 0


def cmd_checkpoint(args) -> int:
    if args.action == "save":
        cfg = _load(args)
        if cfg.algorithm == "admm":
            print("admm has no learnable state to checkpoint", file=sys.stderr)
            return 1
        seed = cfg.seeds[0]
        _, components = harness.run_seed(cfg, seed, keep_components=True)
        harness.save_checkpoint(args.path, cfg, components["learners"],
                                cfg.episodes, components["rngs"])
        print(f"checkpoint written to {args.path}")
        return 0

    cfg = _load(args)
    checkpoint = harness.load_checkpoint(args.path)
    cfg = dataclasses.replace(cfg, algorithm=checkpoint["algorithm"],
                              learner=checkpoint["hyperparams"])
    rows = harness.evaluate_checkpoint(cfg, checkpoint, args.eval_episodes)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, f"{cfg.algorithm}_eval.csv")
        harness.write_rows_csv(rows, path)
        print(f"evaluation metrics: {path}")
    mg = np.mean([r.mg_reward for r in rows])
    print(f"loaded {checkpoint['algorithm']} checkpoint "
          f"(trained {checkpoint['episode']} episodes); "
          f"mean MG reward over {len(rows)} greedy episodes: {mg:.4f}")
    return 0


def cmd_write_config(args) -> int:
    config_mod.write_default_config(args.path)
    print(f"default config written to {args.path}")
    return 0


def main(argv=None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="mgems",
        description="Multi-agent microgrid energy trading simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one algorithm over the seed list")
    _add_run_options(p_run)
    p_run.add_argument("--save-checkpoint", metavar="PATH",
                       help="also train one run and save its weights")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep a parameter (p_fail)")
    _add_run_options(p_sweep)
    p_sweep.add_argument("--param", default="p_fail", choices=["p_fail"])
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated values, e.g. 0,0.01,0.02,0.05")
    p_sweep.set_defaults(func=cmd_sweep)

    p_plot = sub.add_parser("plot", help="re-plot aggregate CSVs in a directory")
    p_plot.add_argument("--in", dest="indir", required=True)
    p_plot.set_defaults(func=cmd_plot)

    p_ck = sub.add_parser("checkpoint", help="save or load learner checkpoints")
    p_ck.add_argument("action", choices=["save", "load"])
    p_ck.add_argument("--path", required=True, help="checkpoint .npz path")
    _add_run_options(p_ck)
    p_ck.add_argument("--eval-episodes", type=int, default=10)
    p_ck.set_defaults(func=cmd_checkpoint)

    p_cfg = sub.add_parser("write-config", help="emit the default config file")
    p_cfg.add_argument("path")
    p_cfg.set_defaults(func=cmd_write_config)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
