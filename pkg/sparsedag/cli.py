import argparse
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import NoReturn, Optional

import sparsedag
from sparsedag.config import ConfigError, ExperimentConfig
from sparsedag.experiments import run_experiment
from sparsedag.metrics import assumption_report, max_beta_min_lambda, structural_score
from sparsedag.objective import stability_threshold
from sparsedag.report import write_bundle
from sparsedag.sem import (
    GraphSpec,
    generate_dataset,
    load_adjacency_csv,
    load_dataset_csv,
    near_cyclic_instance,
    save_dataset,
    simulate_sem,
)
from sparsedag.utils import str_record, str_table

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUN = 2
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class ArgumentParser(argparse.ArgumentParser):
    """Exits with the configuration-error code on usage errors."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="sparsedag", description="Sparse DAG structure learning.")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level.")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Only log errors.")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run an experiment from a config file.")
    run.add_argument("config", type=Path)
    run.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="PATH=VALUE",
        help="Override a config field by dotted path (repeatable).",
    )
    run.add_argument("--workers", type=int, default=None, help="Parallel work items.")
    run.add_argument("--output-dir", type=Path, default=None)

    gen = commands.add_parser("gen", help="Generate a synthetic dataset.")
    gen.add_argument("--d", type=int, default=10, help="Number of nodes.")
    gen.add_argument("--edges", type=int, default=None, help="Number of edges (default d).")
    gen.add_argument("--n", type=int, default=1000, help="Number of samples.")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--noise-std", type=float, default=1.0)
    gen.add_argument("--weight-low", type=float, default=0.5)
    gen.add_argument("--weight-high", type=float, default=1.0)
    gen.add_argument(
        "--near-cyclic", action="store_true", help="Sample the near-cyclic 3-cycle instead."
    )
    gen.add_argument("--out", type=Path, required=True, help="Output directory.")

    score = commands.add_parser("score", help="Compare an estimate with the truth.")
    score.add_argument("estimate", type=Path)
    score.add_argument("truth", type=Path)
    score.add_argument("--tau", type=float, default=0.3)

    check = commands.add_parser("check", help="Check the support-recovery assumptions.")
    check.add_argument("data", type=Path)
    check.add_argument("truth", type=Path)
    check.add_argument("--lambda1", type=float, default=0.1)
    check.add_argument("--no-header", action="store_true")
    check.add_argument("--no-center", action="store_true")

    commands.add_parser("version", help="Print the version.")
    return parser


def configure_logging(args: argparse.Namespace) -> None:
    level = logging.WARNING
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.ERROR
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = ExperimentConfig.read(args.config, tuple(args.set))
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    bundle = run_experiment(cfg, args.workers)
    written = write_bundle(bundle, cfg.output_dir)
    aggregates = bundle.summary.get("aggregates", [])
    if aggregates:
        header = list(aggregates[0])
        print(str_table([[row[k] for k in header] for row in aggregates], header))
    print(f"Wrote {len(written)} files to {cfg.output_dir}")
    if bundle.error_rows:
        logger.error("%d work item(s) failed", bundle.error_rows)
        return EXIT_RUN
    return EXIT_OK


def cmd_gen(args: argparse.Namespace) -> int:
    if args.near_cyclic:
        dataset = simulate_sem(
            near_cyclic_instance(), args.n, args.noise_std, args.seed, near_cyclic=True
        )
    else:
        graph = GraphSpec(
            args.d,
            args.d if args.edges is None else args.edges,
            args.weight_low,
            args.weight_high,
            args.seed,
        )
        dataset = generate_dataset(graph, args.n, args.noise_std)
    for path in save_dataset(dataset, args.out):
        print(path)
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    score = structural_score(load_adjacency_csv(args.estimate), load_adjacency_csv(args.truth), args.tau)
    print(str_record(score.as_dict()))
    return EXIT_OK


def cmd_check(args: argparse.Namespace) -> int:
    dataset = load_dataset_csv(
        args.data, not args.no_header, not args.no_center, truth_path=args.truth
    )
    report = assumption_report(dataset, dataset.w_true, args.lambda1)
    record = report.as_dict() | {"stability_threshold": stability_threshold(dataset)}
    if 0 < report.kappa_hat:
        record["max_beta_min_lambda1"] = max_beta_min_lambda(dataset.w_true, report.kappa_hat)
    print(str_record(record))
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "run": cmd_run,
    "gen": cmd_gen,
    "score": cmd_score,
    "check": cmd_check,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point of the `sparsedag` command.

    Returns:
        0 on success, 1 on configuration or usage errors, 2 when a command
        fails or an experiment has failed work items.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    configure_logging(args)

    if args.command == "version":
        print(sparsedag.__version__)
        return EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logger.debug("Command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
