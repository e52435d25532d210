"""Command-line front end.

    ringclim <stage> [--config PATH] [--seed N] [--threads N]
    ringclim run --config PATH --stages simulate,fit-fce,fit-vce,classify

Exit codes: 0 success, 2 configuration or dependency error, 3 data error,
4 convergence warning (outputs written).
"""

from __future__ import annotations

import argparse
import logging
import sys

from .design import DesignError
from .lasso import StandardizationError
from .pipeline import STAGES, ConfigError, DependencyError, RunConfig, run_pipeline
from .ring_data import RingDataError
from .sampler_core import SamplerError
from .water_balance import WaterBalanceError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE = 0, 2, 3, 4


def build_parser():
    parser = argparse.ArgumentParser(prog="ringclim",
                                     description="Tree-ring climate-sensitivity pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--threads", type=int, default=1, help="worker processes for MCMC chains")
        p.add_argument("--output", help="override paths.output")
        p.add_argument("-v", "--verbose", action="store_true")

    for stage in STAGES:
        common(sub.add_parser(stage, help=f"run the {stage} stage"))
    run = sub.add_parser("run", help="run several stages in pipeline order")
    common(run)
    run.add_argument("--stages", default=",".join(STAGES), help="comma-separated stage list")
    return parser


def load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
    if args.seed is not None:
        cfg.data["seed"] = args.seed
    if args.output:
        cfg.data["paths"]["output"] = args.output
    cfg.validate()
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stages = args.stages if args.command == "run" else args.command
    try:
        cfg = load_config(args)
        run = run_pipeline(cfg, stages, threads=args.threads)
    except (ConfigError, DependencyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (RingDataError, DesignError, WaterBalanceError, StandardizationError, SamplerError,
            FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    if run.warnings:
        for w in run.warnings:
            print(f"warning: {w}", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
