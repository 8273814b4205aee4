"""Command line entry point: ``cdmad-lab run | sweep | report``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .harness import ConfigError, RunConfig, build_dataset, run_experiment, sweep
from .data import save_dataset
from .report import emit, load_results

log = logging.getLogger("cdmad_lab")


def _load_config(path, seed=None, out=None):
    cfg = RunConfig.load(path) if path else RunConfig()
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out_dir = out
    return cfg


def cmd_run(args):
    cfg = _load_config(args.config, args.seed, args.out)
    if args.save_dataset:
        save_dataset(build_dataset(cfg)[2], args.save_dataset)
    res = run_experiment(cfg)
    emit([res], cfg.out_dir)
    print(f"{res.config_id} seed={res.seed} bacc={res.final['bacc']:.4f} "
          f"gm={res.final['gm']:.4f} ber={res.final['ber']:.4f} -> {cfg.out_dir}")
    return 0


def cmd_sweep(args):
    base = _load_config(args.config, out=args.out)
    with open(args.grid) as fh:
        grid = json.load(fh)
    table, results = sweep(grid, base)
    emit(results, base.out_dir)
    for row in table["rows"]:
        print(f"{row['config_id']} {row['algo']:<10} {row['refine']:<16} {row['probe']:<10} "
              f"bacc={row['bacc_mean']:.4f}+-{row['bacc_se']:.4f}")
    for err in table["errors"]:
        print(f"failed cell: {err['error']}", file=sys.stderr)
    return 1 if table["errors"] else 0


def cmd_report(args):
    results = load_results(args.in_dir)
    paths = emit(results, args.in_dir)
    print(f"wrote {len(paths)} files to {args.in_dir}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="cdmad-lab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one configuration")
    r.add_argument("--config", help="JSON config (omitted: all defaults)")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="output directory (overrides out_dir)")
    r.add_argument("--save-dataset", metavar="PATH", help="also write the dataset container")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a grid of config deltas over seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    rep = sub.add_parser("report", help="re-emit summaries from results.json")
    rep.add_argument("--in", dest="in_dir", required=True)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
