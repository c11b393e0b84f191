"""Command-line entry point: ``qdmeta evolve | test | summarise``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .experiment import (
    DEFAULT_GRID,
    DEFAULT_TOLERANCE,
    EvolveConfig,
    UsageError,
    all_conditions,
    export_summary,
    run_damage_test,
    run_evolve,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("qdmeta")


def load_config(path) -> dict:
    """Flat key-value settings from a ``.toml`` or ``.json`` file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a table of key-value pairs")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _apply_config(args: argparse.Namespace, allowed) -> argparse.Namespace:
    if getattr(args, "config", None) is None:
        return args
    for key, value in load_config(args.config).items():
        if key not in allowed:
            raise UsageError(f"unknown config key {key!r}")
        setattr(args, key, value)
    return args


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qdmeta", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    ev = sub.add_parser("evolve", help="run one condition to budget")
    ev.add_argument("--condition", help="one of: " + ", ".join(all_conditions()))
    ev.add_argument("--control", default="static", help="static, static-mr:X, static-gen:X, anneal-mr, endo-gen, rl-mr ...")
    ev.add_argument("--budget", type=int, default=EvolveConfig.budget)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", default=None, help="output directory (default runs/<condition>-s<seed>)")
    ev.add_argument("--batch-size", type=int, default=EvolveConfig.batch_size)
    ev.add_argument("--initial-population", type=int, default=EvolveConfig.initial_population)
    ev.add_argument("--popsize", type=int, default=EvolveConfig.popsize)
    ev.add_argument("--save-database", action="store_true", help="also write the k-best database snapshot")
    ev.add_argument("--config", help="TOML or JSON file; its keys override flags")

    te = sub.add_parser("test", help="damage-recovery test of an archive file")
    te.add_argument("--archive", required=True)
    te.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    te.add_argument("--grid", default="x".join(map(str, DEFAULT_GRID)), help="radial x angular cells, e.g. 20x36")
    te.add_argument("--no-damage", action="store_true", help="test the undamaged arm only")
    te.add_argument("--out", default=None, help="result JSON (default damage_test.json next to the archive)")
    te.add_argument("--config", help="TOML or JSON file; its keys override flags")

    su = sub.add_parser("summarise", help="aggregate runs below a directory by condition")
    su.add_argument("--dir", required=True)
    return parser


def cmd_evolve(args) -> int:
    names = {f.name for f in fields(EvolveConfig)}
    args = _apply_config(args, names)
    if not args.condition:
        raise UsageError("--condition is required")
    out = args.out or f"runs/{args.condition}-s{args.seed}"
    config = EvolveConfig(**{n: getattr(args, n) for n in names if n != "out"}, out=out)
    path = run_evolve(config)
    print(f"wrote {path}")
    return 0


def cmd_test(args) -> int:
    args = _apply_config(args, {"archive", "tolerance", "grid", "no_damage", "out"})
    archive = Path(args.archive)
    if not archive.exists():
        raise OSError(f"archive not found: {archive}")
    result = run_damage_test(archive, args.tolerance, args.grid, no_damage=args.no_damage)
    out = Path(args.out) if args.out else archive.parent / "damage_test.json"
    out.write_text(json.dumps(result.to_json(), indent=2) + "\n")
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["joint", "offset", "reached", "percent"], lineterminator="\n")
        w.writeheader()
        w.writerows(result.rows)
    agg = result.aggregate()
    print(f"targets reached: {agg['mean']:.2f} +- {agg['sd']:.2f} % over {agg['n_damages']} damage(s)")
    print(f"wrote {out}")
    return 0


def cmd_summarise(args) -> int:
    summary = export_summary(args.dir)
    for label, entry in summary.items():
        mf = entry.get("meta_fitness", {})
        print(f"{label:32s} n={entry['n_runs']}  meta-fitness {mf.get('mean', float('nan')):.1f} +- {mf.get('sd', float('nan')):.1f}")
    return 0


COMMANDS = {"evolve": cmd_evolve, "test": cmd_test, "summarise": cmd_summarise}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError) as exc:
        print(f"qdmeta: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
