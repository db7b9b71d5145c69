"""Command-line interface: ``noisetune gen|train|eval|sweep|compare``."""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .datagen import load_split, make_dataset
from .errors import ConfigError, NoisetuneError, exit_code_for
from .harness import (
    REPORT_NAME,
    SWEEP_SIZES,
    ExperimentConfig,
    evaluate,
    read_smoother_config,
    read_theta,
    run_experiment,
    run_sweep,
    run_training,
    write_report,
)
from .presets import preset_names
from .smoother import SmootherConfig

logger = logging.getLogger("noisetune")

LOG_FORMAT = "[noisetune] %(levelname)s %(message)s"


def configure_logging(verbosity: int = 0) -> None:
    """Install the stderr handler on the ``noisetune`` logger (1: DEBUG, -1: WARNING)."""
    level = {1: logging.DEBUG, -1: logging.WARNING}.get(max(-1, min(1, verbosity)), logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.handlers[:] = [handler]
    logger.setLevel(level)
    logger.propagate = False


class _Parser(argparse.ArgumentParser):
    # Usage errors are configuration errors.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid size list {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive integers")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="noisetune", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_const", const=1, dest="verbosity")
    verbosity.add_argument("-q", "--quiet", action="store_const", const=-1, dest="verbosity")
    parser.set_defaults(verbosity=0)
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = commands.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--preset", default="d1", help=f"one of {', '.join(preset_names())} or a TOML file")
    gen.add_argument("--out", required=True, type=Path)
    gen.add_argument("--seed", type=int, default=0)
    for split in ("train", "train-long", "test"):
        gen.add_argument(f"--n-{split}", type=int, default=None)
        gen.add_argument(f"--len-{split}", type=int, default=None)

    def experiment_options(sub):
        sub.add_argument("--data", type=Path, help="dataset directory")
        sub.add_argument("--config", type=Path, help="experiment TOML file")
        sub.add_argument("--out", type=Path, required=True)
        sub.add_argument("--iterations", type=int, default=None, help="override both trainers")

    train = commands.add_parser("train", help="learn theta with one method")
    train.add_argument("--method", choices=("ours", "leo", "both"), default="ours")
    experiment_options(train)

    ev = commands.add_parser("eval", help="test RMSE of a theta file")
    ev.add_argument("--theta", required=True, type=Path)
    ev.add_argument("--data", required=True, type=Path)
    ev.add_argument("--split", default="test")
    ev.add_argument("--limit", type=int, default=None)
    ev.add_argument("--config", type=Path, help="experiment TOML file; only [smoother] is read")
    ev.add_argument("--relin-threshold", type=float, default=None)

    sweep = commands.add_parser("sweep", help="training-set-size sweep")
    sweep.add_argument("--sizes", type=_sizes, default=list(SWEEP_SIZES))
    sweep.add_argument("--method", choices=("ours", "leo", "both"), default="both")
    experiment_options(sweep)

    compare = commands.add_parser("compare", help="train and test both methods")
    experiment_options(compare)
    return parser


def _experiment_config(args, methods) -> ExperimentConfig:
    overrides = {"data": args.data, "out": args.out, "methods": methods}
    if args.config is not None:
        config = ExperimentConfig.from_toml(args.config, **overrides)
    else:
        if args.data is None:
            raise ConfigError("--data or --config is required")
        config = ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
    if args.iterations is not None:
        config = replace(
            config,
            train=replace(config.train, iterations=args.iterations),
            leo=replace(config.leo, iterations=args.iterations),
        )
    return config


def _eval_smoother(args) -> SmootherConfig:
    smoother = read_smoother_config(args.config) if args.config is not None else SmootherConfig()
    if args.relin_threshold is not None:
        smoother = replace(smoother, relin_threshold=args.relin_threshold)
    return smoother


def _compare_out(out: Path) -> Path:
    # `compare --out report.csv` names the report file itself.
    return out.parent if out.suffix == ".csv" else out


def run(args) -> int:
    if args.command == "gen":
        manifest = make_dataset(
            args.preset,
            args.out,
            seed=args.seed,
            n_train=args.n_train,
            len_train=args.len_train,
            n_train_long=args.n_train_long,
            len_train_long=args.len_train_long,
            n_test=args.n_test,
            len_test=args.len_test,
        )
        print(manifest)
    elif args.command == "train":
        result = run_training(_experiment_config(args, args.method))
        for tag, theta in result.thetas.items():
            print(f"{tag}: {theta}")
    elif args.command == "eval":
        theta = read_theta(args.theta)
        trajectories = load_split(args.data, args.split, args.limit)
        trans, rot = evaluate(theta, trajectories, _eval_smoother(args))
        print(f"rmse_trans_m={trans:.6f} rmse_rot_rad={rot:.6f}")
    elif args.command == "sweep":
        result = run_sweep(_experiment_config(args, args.method), args.sizes)
        print(args.out / REPORT_NAME)
        logger.info("%d report rows", len(result.rows))
    elif args.command == "compare":
        target = args.out
        args.out = _compare_out(target)
        result = run_experiment(_experiment_config(args, "both"))
        if target.suffix == ".csv" and target.name != REPORT_NAME:
            write_report(result.rows, target)
        print(target if target.suffix == ".csv" else target / REPORT_NAME)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbosity)
    try:
        return run(args)
    except NoisetuneError as e:
        logger.error("%s", e)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
