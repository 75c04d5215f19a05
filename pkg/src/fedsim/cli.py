"""Command-line entry point.

Subcommands:
  run          execute one experiment from a JSON config
  ablate       run the with/without-augmentation pair and print the delta
  gradcheck    finite-difference check of all loss gradients
  inspect-idx  print the header of an IDX file

FEDSIM_LOG sets the log level (DEBUG/INFO/WARNING/...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .data import parse_idx
from .errors import FedsimError
from .gradcheck import run_gradcheck
from .harness import load_config, run_experiment, summary_json


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment JSON file")
    p.add_argument("--out-dir", default="out", help="output directory")
    p.add_argument("--seed-override",
                   help="comma-separated seeds replacing the config's list")
    p.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Desk-scale federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_run_flags(sub.add_parser("run", help="run one experiment"))
    _add_run_flags(sub.add_parser(
        "ablate", help="run augmentation on/off pair and print the delta"))

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--trials", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=1e-4)

    i = sub.add_parser("inspect-idx", help="print an IDX file's header")
    i.add_argument("file")
    return parser


def _load(args) -> "ExperimentConfig":
    config = load_config(args.config)
    if args.seed_override:
        seeds = tuple(int(s) for s in args.seed_override.split(","))
        config = replace(config, seeds=seeds)
    return config


def cmd_run(args) -> int:
    config = _load(args)
    summary = run_experiment(config, args.out_dir, transport=args.transport,
                             quiet=args.quiet)
    if not args.quiet:
        sys.stdout.write(summary_json(summary))
    print(f"wrote {Path(args.out_dir) / 'metrics.csv'} and summary.json")
    return 0


def cmd_ablate(args) -> int:
    config = _load(args)
    out = Path(args.out_dir)
    with_aug = replace(config, augment=replace(config.augment, enabled=True))
    without = replace(config, augment=replace(config.augment, enabled=False))
    s_aug = run_experiment(with_aug, out / "aug", transport=args.transport,
                           quiet=args.quiet)
    s_plain = run_experiment(without, out / "noaug", transport=args.transport,
                             quiet=args.quiet)
    print(f"with augmentation:    {s_aug.average:.4f}")
    print(f"without augmentation: {s_plain.average:.4f}")
    print(f"delta:                {s_aug.average - s_plain.average:+.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(trials=args.trials, seed=args.seed)
    worst = report.worst()
    print(f"{len(report.results)} checks in {report.elapsed_s:.1f}s, "
          f"max relative error {report.max_rel_err:.3e} "
          f"(loss={worst.kind}, trial={worst.trial})")
    if report.max_rel_err >= args.tolerance:
        print(f"FAIL: exceeds tolerance {args.tolerance:.1e}", file=sys.stderr)
        return 1
    print("OK")
    return 0


def cmd_inspect_idx(args) -> int:
    data = Path(args.file).read_bytes()
    parsed = parse_idx(data)
    header = {
        "kind": parsed.kind,
        "magic": "0x00000803" if parsed.kind == "images" else "0x00000801",
        "count": int(parsed.array.shape[0]),
    }
    if parsed.kind == "images":
        header["rows"] = int(parsed.array.shape[1])
        header["cols"] = int(parsed.array.shape[2])
    print(json.dumps(header, indent=2))
    return 0


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("FEDSIM_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    handlers = {
        "run": cmd_run,
        "ablate": cmd_ablate,
        "gradcheck": cmd_gradcheck,
        "inspect-idx": cmd_inspect_idx,
    }
    try:
        return handlers[args.command](args)
    except FedsimError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
