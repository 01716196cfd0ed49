"""Command-line front end: ``autoemb {run,compare,figures,synth}``.

Exit status: 0 on success, 2 on usage/config errors, 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ExperimentConfig, SynthSpec
from .errors import AutoEmbError, ConfigError
from .report import cmd_compare, cmd_figures, cmd_run, cmd_synth, format_table

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--dataset", help="ratings CSV (optionally .gz) or binary .bin cache")
    p.add_argument("--synth", action="store_true", help="use a synthetic stream")
    p.add_argument("--synth-users", type=int)
    p.add_argument("--synth-items", type=int)
    p.add_argument("--synth-interactions", type=int)
    p.add_argument("--synth-exponent", type=float)
    p.add_argument("--synth-seed", type=int)
    p.add_argument("--task", choices=["regression", "classification"])
    p.add_argument("--mode", choices=["fse", "sam", "darts_weights", "autoemb"])
    p.add_argument("--preset", choices=["fidelity", "desk"])
    p.add_argument("--dims", type=int, nargs="+")
    p.add_argument("--hidden", type=int, nargs="+")
    p.add_argument("--controller-hidden", type=int, nargs="+")
    p.add_argument("--feature-size", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-w", type=float)
    p.add_argument("--lr-theta", type=float)
    p.add_argument("--xi", type=float)
    p.add_argument("--second-order", action="store_true", default=None)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--offline-fraction", type=float)
    p.add_argument("--val-capacity", type=int)
    p.add_argument("--bn-eps", type=float)
    p.add_argument("--bn-momentum", type=float)
    p.add_argument("--popularity-edges", type=float, nargs="+")
    p.add_argument("--output-dir")


SYNTH_FLAGS = {"synth_users": "users", "synth_items": "items", "synth_interactions": "interactions",
               "synth_exponent": "exponent", "synth_seed": "seed"}


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
    synth = base.get("synth")
    overrides = {k: getattr(args, k) for k in SYNTH_FLAGS if getattr(args, k) is not None}
    if args.synth or overrides:
        synth = dict(synth or {})
        synth.update({SYNTH_FLAGS[k]: v for k, v in overrides.items()})
        base["synth"] = SynthSpec(**synth).__dict__
    for name in ("dataset", "task", "mode", "preset", "dims", "hidden", "controller_hidden", "feature_size",
                 "batch_size", "lr_w", "lr_theta", "xi", "second_order", "seeds", "offline_fraction",
                 "val_capacity", "bn_eps", "bn_momentum", "popularity_edges", "output_dir"):
        value = getattr(args, name)
        if value is not None:
            base[name] = value
    if "preset" in base and args.preset is not None:
        # an explicit preset re-derives every size field not given on the command line
        for name in ("dims", "hidden", "controller_hidden", "batch_size", "lr_w", "lr_theta"):
            if getattr(args, name) is None:
                base.pop(name, None)
    return ExperimentConfig.from_dict(base)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autoemb", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment (one directory per seed)")
    _add_run_args(p_run)

    p_cmp = sub.add_parser("compare", help="mean ± std table across run directories")
    p_cmp.add_argument("run_dirs", nargs="+")
    p_cmp.add_argument("--stage", default="online", choices=["offline", "online"])
    p_cmp.add_argument("--task", default="regression", choices=["regression", "classification"])
    p_cmp.add_argument("--json", action="store_true", help="print rows as JSON")

    p_fig = sub.add_parser("figures", help="write popularity/weight/learning-curve CSVs")
    p_fig.add_argument("run_dir")
    p_fig.add_argument("--stage", choices=["offline", "online"])

    p_syn = sub.add_parser("synth", help="write a synthetic stream (CSV, or .bin cache)")
    p_syn.add_argument("path")
    p_syn.add_argument("--users", type=int, default=2000)
    p_syn.add_argument("--items", type=int, default=1000)
    p_syn.add_argument("--interactions", type=int, default=50000)
    p_syn.add_argument("--exponent", type=float, default=1.2)
    p_syn.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            out = cmd_run(config_from_args(args))
            print(out)
        elif args.command == "compare":
            rows = cmd_compare(args.run_dirs, args.stage)
            print(json.dumps(rows, indent=2) if args.json else format_table(rows, args.task))
        elif args.command == "figures":
            for path in cmd_figures(args.run_dir, args.stage):
                print(path)
        elif args.command == "synth":
            print(cmd_synth(args.users, args.items, args.interactions, args.exponent, args.seed, args.path))
    except (ConfigError, TypeError) as exc:
        print(f"autoemb: usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (AutoEmbError, OSError) as exc:
        print(f"autoemb: error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
