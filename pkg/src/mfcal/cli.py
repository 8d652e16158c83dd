"""Command-line driver for the calibration pipeline.

Exit codes: 0 success, 1 configuration or argument error, 2 missing
upstream artifact, 3 numerical failure or replay mismatch.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .errors import (
    ChainAborted,
    EstimationFailure,
    InsufficientData,
    IntegrationFailure,
    InvalidArgument,
    NumericalFailure,
    SingularDesign,
)
from .model import MODES
from .pipeline import Archive, MissingArtifact, StageRecord, replay, run_stage
from .seqdesign import StepAborted

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3

FULL_PIPELINE = ("design", "simulate", "observe", "fit", "sample", "summarize")
NUMERICAL_ERRORS = (
    NumericalFailure,
    SingularDesign,
    EstimationFailure,
    IntegrationFailure,
    ChainAborted,
    InsufficientData,
    StepAborted,
)


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the configuration code rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfcal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "design": "space-filling low design and nested high subset",
        "simulate": "run both Lorenz '96 fidelities over the designs",
        "observe": "noisy synthetic observations from a high fidelity truth run",
        "fit": "EOF bases and GP hyperparameters",
        "sample": "Metropolis-Hastings chains for the input posterior",
        "ei": "expected-improvement surface of the current fit",
        "loop": "sequential EI augmentation with refits",
        "summarize": "posterior mode, intervals, KDE grid and hyperparameter table",
        "run": "design, simulate, observe, fit, sample and summarize in one go",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--archive", required=True, type=Path, help="archive directory")
        p.add_argument("--config", type=Path, help="key=value config (required for a new archive)")
        if name in ("design", "observe", "fit", "sample", "run"):
            p.add_argument("--seed", type=int, help="override the stage seed from the config")
        if name in ("fit", "sample", "ei", "loop", "summarize", "run"):
            p.add_argument("--mode", choices=MODES, help="override the configured mode")
        if name == "loop":
            p.add_argument("--steps", type=int, help="number of sequential steps (default from config)")
    p = sub.add_parser("replay", help="re-run an archive's stages and compare every output byte for byte")
    p.add_argument("--archive", required=True, type=Path, help="archive to replay")
    p.add_argument("--out", required=True, type=Path, help="empty directory for the replayed archive")
    return parser


def _open(args) -> Archive:
    archive = Archive(args.archive)
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file {args.config} does not exist")
        archive.initialize(load_config(args.config))
    else:
        archive.require("config.txt", "a command with --config")
    return archive


def _records(args) -> list[StageRecord]:
    mode = getattr(args, "mode", None)
    seed = getattr(args, "seed", None)
    if args.command == "run":
        # the seed override goes to the sampler, the only stage users usually vary
        out = []
        for name in FULL_PIPELINE:
            rec = StageRecord(name, mode=mode if name in ("fit", "sample", "summarize") else None)
            if name == "sample":
                rec.seed = seed
            out.append(rec)
        return out
    return [StageRecord(args.command, mode=mode, seed=seed, steps=getattr(args, "steps", None))]


def _execute(args) -> int:
    if args.command == "replay":
        diff = replay(Archive(args.archive), Archive(args.out))
        if diff:
            for rel in diff:
                print(f"differs: {rel}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"replay of {args.archive} is byte-identical")
        return EXIT_OK
    archive = _open(args)
    for rec in _records(args):
        done = run_stage(archive, rec)
        archive.record(done)
        print(f"{done.line()}: ok")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _execute(args)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, InvalidArgument, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
