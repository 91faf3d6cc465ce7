"""Command-line interface.

Subcommands mirror the pipeline stages (partition, train, merge, invert,
distill, eval) plus a one-shot `pipeline` runner. Stages read and write
only files under --out-dir, so they can be run separately or replayed.

Exit codes: 0 success, 1 numeric failure (divergence, non-finite math),
2 I/O or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline as pl
from .config import ConfigError, default_config, dump_toml, load_config
from .data import PartitionError
from .distillation import DistillError
from .inversion import InversionError
from .merging import MergeError
from .network import MissingBuffersError, SpecError
from .serialization import FormatError
from .tensor import GraphError, NumericError

_NUMERIC_ERRORS = (NumericError, GraphError, InversionError, DistillError, MissingBuffersError)
_CONFIG_ERRORS = (ConfigError, FormatError, PartitionError, MergeError, SpecError,
                  FileNotFoundError, IsADirectoryError, PermissionError, ValueError)


def _apply_overrides(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "scheme", None):
        cfg.merge.scheme = args.scheme
    if getattr(args, "lam", None) is not None:
        cfg.merge.lam = args.lam
    if getattr(args, "tau", None) is not None:
        cfg.merge.tau = args.tau
    if getattr(args, "exclude_outliers", False):
        cfg.merge.exclude_outliers = True
    if getattr(args, "unsquared", False):
        cfg.inversion.squared = False
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    return cfg


def _load(args):
    if args.config is None:
        raise ConfigError("--config is required (use --dump-defaults for a template)")
    with open(args.config, "r", encoding="utf-8") as fh:
        text = fh.read()
    cfg = _apply_overrides(load_config(args.config), args)
    return cfg, text


def _run_seed(cfg, args):
    return args.seed if args.seed is not None else cfg.seeds[0]


def _add_common(p, out_dir=True):
    p.add_argument("--config", help="pipeline TOML config")
    p.add_argument("--seed", type=int, help="override the run seed")
    if out_dir:
        p.add_argument("--out-dir", default="runs", help="artifact directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="dmm", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--dump-defaults", action="store_true",
                        help="print the default config as TOML and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("partition", help="generate data and split it across domains")
    _add_common(p)

    p = sub.add_parser("train", help="train one model per domain from a shared init")
    _add_common(p)
    p.add_argument("--domains", help="comma-separated domain ids (default: all)")
    p.add_argument("--jobs", type=int, help="parallel training workers")

    p = sub.add_parser("merge", help="merge domain models and score divergence")
    _add_common(p)
    p.add_argument("--scheme", choices=["uniform", "datasize"])
    p.add_argument("--lambda", dest="lam", type=float, help="parameter/buffer mix in tau")
    p.add_argument("--tau", help="'auto' (mean+std) or a numeric threshold")
    p.add_argument("--exclude-outliers", action="store_true")

    p = sub.add_parser("invert", help="synthesize pseudo-data from merged buffers")
    _add_common(p)
    p.add_argument("--unsquared", action="store_true",
                   help="use literal unsquared norms in the inversion loss")

    p = sub.add_parser("distill", help="distill outlier teachers into the merged model")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)

    p = sub.add_parser("pipeline", help="run every stage for every configured seed")
    _add_common(p)
    p.add_argument("--scheme", choices=["uniform", "datasize"])
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--tau")
    p.add_argument("--exclude-outliers", action="store_true")
    p.add_argument("--unsquared", action="store_true")
    p.add_argument("--jobs", type=int)
    return parser


def _dispatch(args):
    if args.command == "partition":
        cfg, _ = _load(args)
        plan = pl.stage_partition(cfg, _run_seed(cfg, args), args.out_dir)
        print(json.dumps(plan.to_json_dict(), indent=2, sort_keys=True))
        return 0
    if args.command == "train":
        cfg, _ = _load(args)
        domains = None
        if args.domains:
            domains = [int(x) for x in args.domains.split(",")]
        pl.stage_train(cfg, _run_seed(cfg, args), args.out_dir, domains=domains, jobs=args.jobs)
        return 0
    if args.command == "merge":
        cfg, _ = _load(args)
        _, plan = pl.stage_merge(cfg, args.out_dir)
        print(json.dumps(plan.to_json_dict(), indent=2, sort_keys=True))
        return 0
    if args.command == "invert":
        cfg, _ = _load(args)
        batches, holdout = pl.stage_invert(cfg, _run_seed(cfg, args), args.out_dir)
        print(json.dumps({
            "batches": len(batches),
            "final_losses": [b.final_loss for b in batches],
            "holdout_loss": holdout.final_loss,
        }, indent=2))
        return 0
    if args.command == "distill":
        cfg, _ = _load(args)
        _, report = pl.stage_distill(cfg, _run_seed(cfg, args), args.out_dir)
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0
    if args.command == "eval":
        print(json.dumps(pl.evaluate_checkpoint(args.checkpoint, args.dataset),
                         indent=2, sort_keys=True))
        return 0
    if args.command == "pipeline":
        cfg, text = _load(args)
        _, summary = pl.run_pipeline(cfg, args.out_dir, config_text=text)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return 0
    raise ConfigError("no command given (see --help)")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_defaults:
        print(dump_toml(default_config()))
        return 0
    try:
        return _dispatch(args)
    except _NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
