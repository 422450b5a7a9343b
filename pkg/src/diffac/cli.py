"""Command-line entry point: ``diffac <command> [--config cfg.json] ...``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiments
from .config import COMMAND_CONFIGS, TrainRunConfig, load_config
from .errors import DiffACError
from .policy_gradient import ESTIMATORS, TrainConfig

log = logging.getLogger("diffac")

RUNNERS = {
    "pretrain": experiments.run_pretrain,
    "train": experiments.run_train,
    "pg-error": experiments.run_pg_error,
    "data-scarce": experiments.run_data_scarce,
    "ablation-eta2": experiments.run_ablation,
    "bound": experiments.run_bound,
    "plot": experiments.run_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffac", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMAND_CONFIGS:
        p = sub.add_parser(name, help=COMMAND_CONFIGS[name].__doc__.splitlines()[0]
                           if COMMAND_CONFIGS[name].__doc__ else None)
        p.add_argument("--config", help="JSON run config; defaults apply when omitted")
        p.add_argument("--seed", type=int, help="override the config seed(s)")
        p.add_argument("--out-dir", default=f"runs/{name}", help="output directory")
        if name in ("train", "ablation-eta2"):
            p.add_argument("--estimator", choices=ESTIMATORS)
        if name == "train":
            p.add_argument("--algo", choices=("v1", "v2"))
    return parser


def apply_overrides(cfg, args):
    """Fold CLI flags into a loaded config and re-validate it."""
    d = cfg.to_dict()
    if args.seed is not None:
        if "seeds" in d:
            d["seeds"] = [args.seed]
        if "seed" in d:
            d["seed"] = args.seed
        for nested in ("pretrain", "train"):
            if nested in d and "seed" in d[nested]:
                d[nested]["seed"] = args.seed
    if getattr(args, "estimator", None):
        d["train"]["estimator"] = args.estimator
    if getattr(args, "algo", None):
        d["algo"] = args.algo
    return type(cfg).from_dict(d)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.command, args.config), args)
        RUNNERS[args.command](cfg, args.out_dir)
    except DiffACError as exc:
        print(f"diffac {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"diffac {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2
    print(f"diffac {args.command}: wrote {args.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
