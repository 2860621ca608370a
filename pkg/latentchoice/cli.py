"""Command-line front end.

``python -m latentchoice <subcommand> [--config FILE] [--seed N] [--out DIR] [--verbose]``

Subcommands
-----------
generate       draw a synthetic dataset from the ``[synth]`` section
train-crbm     train a C-RBM and extract its significant latents
estimate-mnl   plain MNL estimation
estimate-iclv  cold-start ICLV estimation
two-stage      C-RBM initialised ICLV estimation next to the cold-start baseline
validate       dataset diagnostics
report         tabulate saved MNL/ICLV parameter files
history        list runs recorded in the registry

Exit codes follow :mod:`latentchoice.errors`: 0 on success, 1 for usage
and configuration problems, 2 when an estimation stage fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Optional, Sequence

from . import pipeline, registry
from .config import get_settings
from .errors import LatentChoiceError, UsageError
from .mnl import EstimationResult
from .report import render_report

logger = logging.getLogger(__name__)

COMMANDS = (
    "generate",
    "train-crbm",
    "estimate-mnl",
    "estimate-iclv",
    "two-stage",
    "validate",
    "report",
    "history",
)


class _Parser(argparse.ArgumentParser):
    """Argument parser that raises instead of exiting on bad input."""

    def error(self, message: str):
        raise UsageError(f"{message}\n\n{self.format_usage().strip()}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory (default: LATENTCHOICE_OUTPUT_DIR)")
    common.add_argument("--verbose", action="store_true", help="log at DEBUG level")

    parser = _Parser(prog="latentchoice", description="Latent-variable discrete choice estimation.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        child = sub.add_parser(name, parents=[common])
        if name == "report":
            child.add_argument("params", nargs="+", help="parameter files to tabulate")
            child.add_argument("--label", action="append", dest="labels", help="column label, once per file")
        if name == "history":
            child.add_argument("--limit", type=int, default=20)
    return parser


def _configure_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else getattr(logging, get_settings().log_level.upper(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def _load_config(args: argparse.Namespace) -> pipeline.RunConfig:
    if not args.config:
        raise UsageError(f"'{args.command}' needs --config")
    config = pipeline.RunConfig.from_file(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    return config


def _out_dir(args: argparse.Namespace, config: pipeline.RunConfig) -> Path:
    return Path(args.out or config.output_dir or get_settings().output_dir)


def _record(command: str, config: pipeline.RunConfig, out_dir: Path, label: str, result: EstimationResult) -> None:
    run_id = registry.record_run(
        command,
        config.seed,
        config.digest(),
        label,
        result.statistics.final_ll,
        result.statistics.n_obs,
        result.converged,
        str(out_dir),
    )
    registry.record_estimates(run_id, label, result.parameter_stats or [])


def _plain(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def _run(args: argparse.Namespace) -> int:
    if args.command == "history":
        for run in registry.get_runs(args.limit):
            final_ll = "-" if run["final_ll"] is None else f"{run['final_ll']:.3f}"
            print(f"{run['id']:>5}  {run['command']:<14} seed={run['seed']:<6} {run['model']:<6} LL={final_ll}  {run['out_dir']}")
        return 0

    config = _load_config(args)
    out_dir = _out_dir(args, config)
    logger.info(f"Running '{args.command}' with seed {config.seed} into {out_dir}")

    if args.command == "generate":
        dataset = pipeline.run_generate(config, out_dir)
        print(f"wrote {dataset.n_obs} rows to {out_dir / 'data.csv'}")
    elif args.command == "validate":
        report = pipeline.run_validate(config)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = _plain(asdict(report))
        (out_dir / "diagnostics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        for check in report.checks:
            print(f"{check.name:<24} {'ok' if check.passed else 'FAILED rows ' + str(check.rows[:10])}")
        for warning in report.warnings:
            print(f"warning: {warning}")
        return 0 if report.passed else 1
    elif args.command == "train-crbm":
        _, latent_report = pipeline.run_train_crbm(config, out_dir)
        print(f"kept latents: {[s.name for s in latent_report.kept()]}")
    elif args.command == "estimate-mnl":
        result = pipeline.run_estimate_mnl(config, out_dir)
        _record(args.command, config, out_dir, "MNL", result)
        print(render_report(pipeline.single_report(config, "MNL", result)))
    elif args.command == "estimate-iclv":
        result = pipeline.run_estimate_iclv(config, out_dir)
        _record(args.command, config, out_dir, "ICLV", result)
        print(render_report(pipeline.single_report(config, "ICLV", result)))
    elif args.command == "two-stage":
        result = pipeline.run_two_stage(config, out_dir)
        _record(args.command, config, out_dir, "C-RBM", result.two_stage)
        if result.baseline is not None:
            _record(args.command, config, out_dir, "ICLV", result.baseline)
        print(render_report(result.report))
    elif args.command == "report":
        report = pipeline.report_from_params(config, args.params, args.labels)
        out_dir.mkdir(parents=True, exist_ok=True)
        for fmt in config.report.formats:
            render_report(report, fmt, out_dir / f"report.{pipeline.EXTENSIONS[fmt]}")
        print(render_report(report))
    return 0


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and return the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
        _configure_logging(args.verbose)
        return _run(args)
    except LatentChoiceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return UsageError.exit_code


def main() -> None:
    sys.exit(cli_main())

