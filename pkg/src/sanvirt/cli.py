"""Command line: ``sanvirt run | compare | validate``.

Exit codes: 0 ok, 1 invalid scenario, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .bench import compare, run
from .config import MODES, load_config
from .errors import InvalidConfig, ParseError, SanError, ValidationError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _parse_arch(text):
    """``semi_symmetric`` or ``semi_symmetric:4`` (explicit appliance count)."""
    name, _, count = text.partition(":")
    if name not in MODES:
        raise argparse.ArgumentTypeError(f"unknown architecture {name!r}")
    return name, int(count) if count else None


def _write(text, path):
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_validate(args):
    cfg = load_config(args.scenario)
    sys.stdout.write(cfg.dumps())
    return EXIT_OK


def cmd_run(args):
    cfg = load_config(args.scenario)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.arch:
        name, count = args.arch
        cfg = cfg.with_architecture(name, count)
    rep = run(cfg, trace_path=args.trace)
    _write(rep.to_json(), args.out)
    return EXIT_OK


def cmd_compare(args):
    cfg = load_config(args.scenario)
    archs = [_parse_arch(a) for a in args.arch.split(",")] if args.arch else [
        (m, None) for m in MODES]
    configs = [cfg.with_architecture(name, count) for name, count in archs]
    text, _ = compare(configs, workers=args.workers)
    _write(text, args.out)
    return EXIT_OK


def make_parser():
    p = argparse.ArgumentParser(prog="sanvirt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one scenario and print a JSON report")
    r.add_argument("--scenario", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--arch", type=_parse_arch, help="override the architecture (name[:appliances])")
    r.add_argument("--trace", help="write the JSONL message trace here")
    r.add_argument("--out", help="write the report here instead of stdout")
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("compare", help="run a scenario under several methods, emit CSV")
    c.add_argument("--scenario", required=True)
    c.add_argument("--arch", help="comma-separated methods (default: all five)")
    c.add_argument("--out")
    c.add_argument("--workers", type=int, default=1)
    c.set_defaults(fn=cmd_compare)

    v = sub.add_parser("validate", help="check a scenario and print its canonical form")
    v.add_argument("--scenario", required=True)
    v.set_defaults(fn=cmd_validate)
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ParseError, ValidationError, InvalidConfig) as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SanError, OSError) as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
