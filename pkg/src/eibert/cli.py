"""Command line front end: ``eibert <stage> [--config PATH] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import sys

from .errors import (ConfigError, DependencyError, FormatError, SpecError, TaskError, TrainingError)
from .pipeline import PipelineConfig, Workspace, apply_thread_limit, output_lock, run_all, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC, EXIT_FORMAT = 0, 2, 3, 4, 5
COMMANDS = ("gen-data", "pretrain", "finetune-teacher", "distill", "prune", "quantize", "eval", "report",
            "run-all")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eibert", description="Compress a transformer classifier by cross-distillation, "
                                                "vocabulary pruning and int8 quantization.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="pipeline config (JSON); defaults apply when omitted")
    parser.add_argument("--seed", type=_seed, help="override the config seed")
    parser.add_argument("--out", default="eibert-out", help="output directory (default: %(default)s)")
    parser.add_argument("--mode", choices=("kd", "pi-kd", "cross-kd"), default="cross-kd",
                        help="student variant for the distill stage")
    parser.add_argument("--stage-order", choices=("default", "paper"),
                        help="default: distill, prune, quantize; paper: prune before distillation")
    return parser


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.stage_order is not None:
        changes["stage_order"] = args.stage_order
    return cfg.replace(**changes) if changes else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        apply_thread_limit()
        cfg = load_config(args)
        with output_lock(Workspace(args.out)):
            if args.command == "run-all":
                fragments = run_all(cfg, args.out)
                report = Workspace(args.out).root / "report.txt"
                print(report.read_text(), end="")
                print(f"{len(fragments)} stages completed; outputs in {args.out}")
            else:
                fragment = run_stage(cfg, args.command, args.out, args.mode)
                print(json.dumps(fragment, indent=2, sort_keys=True))
    except (ConfigError, SpecError, TaskError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except TrainingError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
