"""Command-line entry point: ``srmcomm <verb> [--config PATH] [--out DIR] [--jobs N]``.

Exit codes: 0 success, 1 configuration error, 2 solver or numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .gp import GpFormatError
from .motor import ModelError
from .ripple import ConvergenceError, InfeasibleError, TableFormatError
from .sim import InstabilityError

log = logging.getLogger("srmcomm")

VERBS = {
    "synth": lambda cfg, out, jobs: ex.cmd_synth(cfg, out),
    "sweep-velocity": ex.cmd_sweep_velocity,
    "sweep-beta": ex.cmd_sweep_beta,
    "ripple": lambda cfg, out, jobs: ex.cmd_ripple(cfg, out),
    "simulate": lambda cfg, out, jobs: ex.cmd_simulate(cfg, out),
}

NUMERIC_ERRORS = (InfeasibleError, ConvergenceError, InstabilityError, np.linalg.LinAlgError,
                  FloatingPointError)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="srmcomm", description=__doc__.splitlines()[0])
    ap.add_argument("verb", choices=sorted(VERBS))
    ap.add_argument("--config", type=Path, help="YAML experiment config (defaults if omitted)")
    ap.add_argument("--out", type=Path, help="output directory (overrides the config)")
    ap.add_argument("--seedless", action="store_true",
                    help="accepted for compatibility; every algorithm is deterministic")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.jobs < 1:
            raise ex.ConfigError("--jobs must be >= 1")
        cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
        if args.out is not None:
            cfg = replace(cfg, output=args.out)
        files = VERBS[args.verb](cfg, Path(cfg.output), args.jobs)
    except (ex.ConfigError, ModelError, GpFormatError, TableFormatError) as exc:
        log.error("configuration error: %s", exc)
        return 1
    except NUMERIC_ERRORS as exc:
        log.error("numeric failure: %s", exc)
        return 2
    for path in files:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
