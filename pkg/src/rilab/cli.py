"""Command-line entry point.

Usage: rilab COMMAND [flags].  A json config file may supply any flag via
--config; explicit flags override file values.  Exit code 0 on success,
2 on configuration errors, 1 on runtime failures (one categorized line on
stderr either way).
"""

from __future__ import annotations

import argparse
import json
import sys

from .experiments import COMMANDS, ExperimentConfig


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rilab",
        description="random-interlacement sampling and vacant-set "
                    "percolation experiments",
    )
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="json file with defaults for any flag")
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--u", type=float, default=None)
    p.add_argument("--u-grid", type=str, default=None,
                   help="comma-separated increasing levels")
    p.add_argument("--L", type=int, default=None)
    p.add_argument("--L-grid", type=str, default=None,
                   help="comma-separated sizes/separations")
    p.add_argument("--window", type=int, default=None,
                   help="window radius M (eta/ustar) or level count")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--c1", type=float, default=None)
    p.add_argument("--c2", type=float, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--green-range", type=int, default=None)
    p.add_argument("--green-cache", type=str, default=None)
    return p


_FLAG_TO_FIELD = {
    "dim": "d",
    "u": "u",
    "u_grid": "u_grid",
    "L": "L",
    "L_grid": "L_grid",
    "window": "window",
    "reps": "reps",
    "seed": "master_seed",
    "workers": "workers",
    "c1": "c1",
    "c2": "c2",
    "out": "out",
    "green_range": "green_range",
    "green_cache": "green_cache",
}


def build_config(argv=None) -> ExperimentConfig:
    args = _parser().parse_args(argv)
    values = {"command": args.command}
    if args.config:
        with open(args.config) as fh:
            file_vals = json.load(fh)
        for k, v in file_vals.items():
            if k == "command":
                continue
            values[k] = v
    for flag, fieldname in _FLAG_TO_FIELD.items():
        v = getattr(args, flag)
        if v is None:
            continue
        if fieldname in ("u_grid", "L_grid") and isinstance(v, str):
            kind = float if fieldname == "u_grid" else int
            v = [kind(tok) for tok in v.split(",") if tok]
        values[fieldname] = v
    return ExperimentConfig(**values)


def main(argv=None) -> int:
    try:
        cfg = build_config(argv)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"config-error: {exc}", file=sys.stderr)
        return 2
    try:
        record = COMMANDS[cfg.command](cfg)
    except (ValueError, MemoryError) as exc:
        print(f"config-error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures get a categorized line
        print(f"runtime-error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if not cfg.out:
        sys.stdout.write(record.to_csv())
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
