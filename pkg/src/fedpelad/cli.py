"""Command line: ``fedpelad run|sweep|report``. Exit 0 ok, 1 config error, 2 runtime error."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import parse_config
from .experiment import parse_axis, report, run_experiment, sweep
from .federation import ConfigError

log = logging.getLogger("fedpelad")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedpelad", description="Federated LoRA CSI-feedback simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-strategy progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="pretrain once and run every configured strategy")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="override [run] out_dir")
    run.add_argument("--seed", type=int, help="override [run] seed")

    sw = sub.add_parser("sweep", help="grid over rank / alpha_ratio / lr_ratio")
    sw.add_argument("--config", required=True)
    sw.add_argument("--axis", action="append", default=[], help="e.g. r=2,4,8 or lr_ratio=1,5")
    sw.add_argument("--out", help="override [run] out_dir")
    sw.add_argument("--seed", type=int, help="override [run] seed")

    rep = sub.add_parser("report", help="print the comparison table of a finished run")
    rep.add_argument("--in", dest="in_dir", required=True)
    return p


def _load(args):
    cfg = parse_config(args.config)
    overrides = {}
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        overrides["seed"] = args.seed
    return cfg.with_overrides(**overrides) if overrides else cfg


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            cfg = _load(args)
            bundle = run_experiment(cfg)
            print(f"wrote {len(bundle.paths)} artifacts to {cfg.run.out_dir}")
        elif args.command == "sweep":
            cfg = _load(args)
            axes = dict(parse_axis(a) for a in args.axis)
            cells = sweep(cfg, axes)
            print(f"wrote {len(cells)} sweep cells to {cfg.run.out_dir}/sweep_grid.csv")
        else:
            print(report(args.in_dir), end="")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
