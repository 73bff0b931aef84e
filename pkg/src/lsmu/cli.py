"""Command line entry point: ``lsmu {gen-data,train,update,diagnose,all}``.

Exit codes: 0 success, 2 configuration error, 3 numeric/divergence error,
4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .errors import ConfigError, DomainError, NumericError

COMMANDS = {
    "gen-data": pipeline.cmd_gen_data,
    "train": pipeline.cmd_train,
    "update": pipeline.cmd_update,
    "diagnose": pipeline.cmd_diagnose,
    "all": pipeline.cmd_all,
}


def build_parser():
    p = argparse.ArgumentParser(prog="lsmu", description="Latent-space stochastic model updating")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--out", default="run", help="working directory for all artifacts")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = pipeline.RunConfig.from_yaml(args.config, seed=args.seed)
        COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, DomainError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
