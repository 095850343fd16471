# proud/main.py
"""
Command-line surface.  Each subcommand is a ``Command`` registered in the
``commands`` list below; ``cli`` parses, dispatches and maps errors to exit codes.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

from proud import __version__
from proud.datagen import make_domain_suite
from proud.deps import load_config
from proud.errors import ConfigError, ProudError
from proud.harness import (
    export_report,
    format_report,
    load_suite_for,
    pretrain_stage,
    run_ablation,
    run_matrix,
)
from proud.schemas import ExperimentConfig
from proud.store import export_suite_csv, save_checkpoint, save_suite

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage problems raise instead of exiting with argparse's code 2."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _config(args: argparse.Namespace, **overrides) -> ExperimentConfig:
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    return load_config(args.config, **overrides)


def _default_pair(cfg: ExperimentConfig, n_domains: int):
    if cfg.labeled is not None:
        return cfg.labeled, cfg.test
    return 0, n_domains - 1


# ------------------------------------------------------------------ #
#  HANDLERS
# ------------------------------------------------------------------ #
def generate_data(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.generator.seed
    suite = make_domain_suite(cfg.generator, seed)
    save_suite(suite, args.out)
    print(f"✅ {suite.n_domains} domains x {cfg.generator.n_per_domain} samples -> {args.out}")
    if args.csv:
        export_suite_csv(suite, args.csv)
        print(f"✅ CSV export -> {args.csv}")
    return 0


def pretrain_cmd(args: argparse.Namespace) -> int:
    cfg = _config(args)
    suite = load_suite_for(cfg)
    labeled, test = _default_pair(cfg, suite.n_domains)
    arrangement = suite.arrange(labeled, test)
    m, history, _ = pretrain_stage(cfg, suite, arrangement, cfg.seeds[0])
    save_checkpoint(m, args.out)
    best = max((h.val_acc for h in history), default=0.0)
    print(f"✅ pretrained on domain {labeled} ({len(history)} epochs, best val acc {best:.4f}) -> {args.out}")
    return 0


def train(args: argparse.Namespace) -> int:
    overrides = {}
    if args.labeled is not None or args.test is not None:
        overrides = {"labeled": args.labeled, "test": args.test}
        if None in overrides.values():
            raise UsageError("--labeled and --test must be given together")
    cfg = _config(args, **overrides)
    suite = load_suite_for(cfg)
    labeled, test = _default_pair(cfg, suite.n_domains)
    cfg = cfg.model_copy(update={"labeled": labeled, "test": test})
    report = run_matrix(cfg, suite=suite)
    export_report(report, args.out)
    print(f"📊 {report.variant} L={labeled} T={test}: score {100 * report.avg:.2f} over {len(cfg.seeds)} seed(s)")
    print(f"✅ results -> {args.out}")
    return 0


def matrix(args: argparse.Namespace) -> int:
    cfg = _config(args, labeled="all", test="all")
    report = run_matrix(cfg)
    export_report(report, args.out)
    print(f"📊 {report.variant}: Avg {100 * report.avg:.2f}  Std {100 * report.std:.2f}")
    print(f"✅ results -> {args.out}")
    return 0


def ablate(args: argparse.Namespace) -> int:
    cfg = _config(args, labeled="all", test="all")
    report = run_ablation(cfg)
    export_report(report, args.out)
    for variant, m in report.matrices.items():
        diff = report.diffs.get(variant)
        suffix = f"  (diff {100 * diff.avg:+.2f})" if diff else ""
        print(f"📊 {variant}: Avg {100 * m.avg:.2f}  Std {100 * m.std:.2f}{suffix}")
    print(f"✅ results -> {args.out}")
    return 0


def report(args: argparse.Namespace) -> int:
    print(format_report(args.input))
    return 0


# ------------------------------------------------------------------ #
#  REGISTRY
# ------------------------------------------------------------------ #
@dataclass
class Command:
    name: str
    help: str
    handler: Callable[[argparse.Namespace], int]
    needs_config: bool = True
    out_help: Optional[str] = None
    combination: bool = False


commands: List[Command] = [
    Command("generate-data", "generate a synthetic suite file", generate_data, out_help="suite file (PRDS)"),
    Command("pretrain", "pretrain on the labeled domain and write a checkpoint", pretrain_cmd, out_help="checkpoint file"),
    Command("train", "run one combination over all seeds", train, out_help="result directory", combination=True),
    Command("matrix", "run every (labeled, test) combination", matrix, out_help="result directory"),
    Command("ablate", "compare proud, no_udmix and no_pml", ablate, out_help="result directory"),
    Command("report", "print the summary table of a result directory", report, needs_config=False),
]


def _global_flags(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--seed", type=int, default=default, help="run with this single seed")
    parser.add_argument("--quiet", action="store_true", default=default, help="only log warnings")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="proud", description="Semi-supervised domain generalization laboratory")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, None)

    shared = argparse.ArgumentParser(add_help=False)
    _global_flags(shared, argparse.SUPPRESS)

    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)
    for command in commands:
        p = sub.add_parser(command.name, help=command.help, parents=[shared])
        if command.needs_config:
            p.add_argument("--config", type=Path, required=True)
            p.add_argument("--out", type=Path, required=True, help=command.out_help)
        else:
            p.add_argument("--in", dest="input", type=Path, required=True)
        if command.combination:
            p.add_argument("--labeled", type=int)
            p.add_argument("--test", type=int)
        if command.name == "generate-data":
            p.add_argument("--csv", type=Path, help="also write the per-sample CSV export")
        p.set_defaults(handler=command.handler)
    return parser


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; 0 success, 1 config or usage error, 2 anything else."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"❌ {exc.detail}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )
    try:
        return args.handler(args)
    except ProudError as exc:
        print(f"❌ {exc.detail}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        logger.exception("unexpected failure")
        print(f"❌ {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(cli())
