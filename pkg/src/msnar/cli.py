"""Command-line entry point: ``msnar <mode> [--config PATH] [--output-dir PATH] [--seed N] [--threads K]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from msnar.experiments import MODES, ConfigError, load_config, parse_config, run
from msnar.hmm import FilteringError
from msnar.model import ModelError
from msnar.rm import NumericalError
from msnar.simulation import SimulationError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

NUMERICAL_ERRORS = (
    NumericalError,
    FilteringError,
    SimulationError,
    FloatingPointError,
    np.linalg.LinAlgError,
)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msnar", description="Markov-switching nonlinear AR experiments")
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", type=Path, help="JSON config; defaults to the paper_section4 preset")
    p.add_argument("--output-dir", type=Path)
    p.add_argument("--seed", type=int, help="replace the config's seed list with this seed")
    p.add_argument("--threads", type=int, help="worker processes for per-seed cells")
    return p


def _fail(code: int, kind: str, message: str) -> int:
    # one line, machine-parsable
    print(json.dumps({"error": kind, "exit_code": code, "message": " ".join(str(message).split())}),
          file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("MSNAR_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.config is not None:
            cfg = load_config(args.config, args.mode)
        else:
            cfg = parse_config({"preset": "paper_section4"}, args.mode)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be nonnegative")
            cfg = replace(cfg, seeds=(args.seed,))
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            cfg = replace(cfg, threads=args.threads)
        if args.output_dir is not None:
            cfg = replace(cfg, output_dir=args.output_dir)
    except (ConfigError, ModelError) as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))

    try:
        report = run(cfg)
    except NUMERICAL_ERRORS as exc:
        return _fail(EXIT_NUMERICAL, "numerical", f"{type(exc).__name__}: {exc}")
    except (ConfigError, ModelError) as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    print(Path(cfg.output_dir) / "report.json")
    logging.getLogger("msnar.cli").info("mode %s finished in %.2fs", report["mode"], report["timings"]["total_seconds"])
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
