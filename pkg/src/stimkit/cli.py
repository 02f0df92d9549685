"""``stimkit`` command line."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .config import load
from .exceptions import StimkitError

_HELP = {
    "simulate": "generate a synthetic data set with known effects",
    "match": "propensity scores, 1:1 nearest-neighbour matching, balance table",
    "did": "two-way fixed effects DiD, pretrend test, margins, substitution, bunching",
    "forest": "nuisances, causal forest, DR scores, BLP, importance",
    "ale": "accumulated local effects and demand/supply variance shares",
    "incidence": "map consumer effects to establishments",
    "welfare": "demand fit, markups, MVPF",
    "target": "targeting-gain curves",
    "tree": "depth-2 SME-weighted policy trees",
    "hybrid": "coupon/SME-transfer budget plan",
    "all": "run every step in order",
}


def _common() -> argparse.ArgumentParser:
    # SUPPRESS defaults so options given before the subcommand are not reset by the subparser
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="key = value config file or a manifest.json")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: out)")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the master seed")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="only warnings and errors")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="stimkit", parents=[common],
                                     description="Consumption-coupon evaluation pipeline.")
    parser.add_argument("--version", action="version", version=f"stimkit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, text in _HELP.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    quiet = getattr(args, "quiet", False)
    logging.basicConfig(level=logging.WARNING if quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)

    from .pipeline import Context, run_all, run_step

    try:
        cfg = load(getattr(args, "config", None), getattr(args, "seed", None))
        ctx = Context(cfg, getattr(args, "out", "out"))
        written = run_all(ctx) if args.command == "all" else run_step(ctx, args.command)
    except StimkitError as exc:
        print(f"stimkit: error: {exc}", file=sys.stderr)
        return exc.exit_code
    if not quiet:
        for path in written:
            print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
