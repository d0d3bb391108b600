"""Command line entry point.

Subcommands::

    ptsbe run CONFIG [--jobs N] [--seed-offset K] [--out DIR]
    ptsbe sweep CONFIG --vary KEY=V1,V2,... [--jobs N] [--seed-offset K] [--out DIR]
    ptsbe report DIR
    ptsbe validate CONFIG

Exit status is 0 on success, 2 for configuration errors and 3 for failures
while running. Without ``--out`` results go to ``$PTSBE_OUT/<name>``
(default root ``results``) unless the config sets ``out``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from .config import ConfigError, load_config, parse_config, set_dotted
from .runner import default_out, run_experiment, write_aggregate

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ptsbe", description="Model-based exploration experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config")
        sp.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
        sp.add_argument("--seed-offset", type=int, default=0, help="added to every seed in the config")
        sp.add_argument("--out", default=None, help="output directory")

    common(sub.add_parser("run", help="execute every seed of a config"))
    sp = sub.add_parser("sweep", help="grid over one config key")
    common(sp)
    sp.add_argument("--vary", required=True, help="dotted key and values, e.g. planner.bonus.eta=0,0.1,1")
    sp = sub.add_parser("report", help="re-aggregate the trace CSVs in a directory")
    sp.add_argument("dir")
    sp = sub.add_parser("validate", help="parse and check a config without running it")
    sp.add_argument("config")
    return p


def _parse_vary(spec: str) -> tuple[str, list]:
    if "=" not in spec:
        raise ConfigError("--vary expects KEY=V1,V2,...", None, "--vary")
    key, values = spec.split("=", 1)
    return key.strip(), [yaml.safe_load(v) for v in values.split(",") if v.strip()]


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "validate":
            cfg = load_config(args.config)
            print(f"{args.config}: ok ({cfg.name}, {len(cfg.seeds)} seeds, mode {cfg.planner.mode})")
            return EXIT_OK
        if args.command == "report":
            d = Path(args.dir)
            if not d.is_dir():
                print(f"error: {d} is not a directory", file=sys.stderr)
                return EXIT_CONFIG
            print(write_aggregate(d))
            return EXIT_OK
        cfg = load_config(args.config)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1", args.config, "--jobs")
        if args.command == "run":
            print(run_experiment(cfg, default_out(cfg, args.out), args.jobs, args.seed_offset))
            return EXIT_OK
        key, values = _parse_vary(args.vary)
        root = default_out(cfg, args.out)
        variants = [(v, parse_config(set_dotted(cfg.raw, key, v), args.config)) for v in values]
        for v, variant in variants:
            print(run_experiment(variant, root / f"{key}={v}", args.jobs, args.seed_offset))
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - report any run failure as exit 3
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
