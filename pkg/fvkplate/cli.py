"""Command-line interface: one subcommand per experiment kind."""

import argparse
import logging
import sys

from .config import ExperimentConfig, load_experiment_config
from .errors import ConfigError
from .experiments import EXPERIMENT_REGISTRY, run_experiment

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ABORT = 2


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors, not solver aborts
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="fvkplate",
        description="Gradient-flow minimization of the bilayer plate energy.",
    )
    sub = parser.add_subparsers(dest="kind", required=True, metavar="EXPERIMENT")
    for kind, entry in EXPERIMENT_REGISTRY.items():
        p = sub.add_parser(kind, help=entry["label"], description=entry["label"])
        p.add_argument("-c", "--config", help="KEY=VALUE config file (see configs/README.md)")
        p.add_argument("-o", "--output", help="output directory")
        p.add_argument("--threads", type=int, help="BLAS threads")
        p.add_argument("--workers", type=int, help="processes for independent sweep points")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded, no process pool")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip().lower()] = value.strip()
    if args.output:
        out["output_dir"] = args.output
    if args.workers is not None:
        out["workers"] = str(args.workers)
    if args.deterministic:
        out["deterministic"] = "true"
    return out


def load(args: argparse.Namespace) -> ExperimentConfig:
    return load_experiment_config(args.config, args.kind, _overrides(args))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load(args)
    except ConfigError as e:
        log.error("Config error: %s", e)
        return EXIT_CONFIG
    return run_experiment(config)
