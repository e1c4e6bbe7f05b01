"""Command line: ``qcdkit {calibrate,run,fdr,validate-config}``.

Exit codes: 0 success, 2 configuration error, 3 calibration failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .calibration import CalibrationCache, CalibrationError, MCConfig, calibrate_threshold
from .experiments import (EXPERIMENTS, ConfigError, resolve_config, run_experiment, timed,
                          validate_config, write_outputs)
from .model import ContractError
from .registry import KINDS, DetectorSpec

EXIT_OK, EXIT_CONFIG, EXIT_CALIBRATION = 0, 2, 3


def _load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _common(p):
    p.add_argument("--seed", type=int, help="base random seed")
    p.add_argument("--reps", type=int, help="Monte Carlo replications")
    p.add_argument("--out", help="output directory (default results/<experiment>)")
    p.add_argument("--scale", choices=("desk", "paper"), help="desk: K=50, 500 reps, gamma in {100, 300}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qcdkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment and write CSV, metadata and a plot script")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", help="JSON experiment config")
    _common(p)

    p = sub.add_parser("fdr", help="shorthand for 'run fdr'")
    p.add_argument("--config", help="JSON experiment config")
    _common(p)

    p = sub.add_parser("calibrate", help="Monte Carlo threshold for a target ARL")
    p.add_argument("kind", choices=sorted(KINDS))
    p.add_argument("--K", type=int, default=1)
    p.add_argument("--param", action="append", default=[], metavar="NAME=VALUE",
                   help="detector parameter, value parsed as JSON when possible")
    p.add_argument("--arl", type=float, default=1000.0)
    p.add_argument("--tolerance", type=float, default=0.05)
    p.add_argument("--horizon", type=int)
    p.add_argument("--cache", help="JSON-lines calibration cache file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=2000)

    p = sub.add_parser("validate-config", help="check a config against the schema")
    p.add_argument("config")
    return parser


def _run(args, experiment) -> int:
    raw = _load(args.config) if args.config else {"experiment": experiment}
    if raw.get("experiment", experiment) != experiment:
        raise ConfigError(f"config is for {raw.get('experiment')!r}, not {experiment!r}")
    raw.setdefault("experiment", experiment)
    cfg = resolve_config(raw, scale=args.scale, seed=args.seed, reps=args.reps)
    out = args.out or os.path.join("results", experiment)
    if args.config and os.path.abspath(out) == os.path.dirname(os.path.abspath(args.config)):
        raise ConfigError("output directory must differ from the config's directory")
    table, wall = timed(run_experiment, cfg)
    paths = write_outputs(table, cfg, out, wall)
    print(json.dumps({"experiment": experiment, "rows": len(table.rows), "wall_time_seconds": round(wall, 3),
                      "outputs": paths, "summary": {k: v for k, v in table.summary.items()
                                                    if k != "per_replication"}}, indent=2))
    return EXIT_OK


def _calibrate(args) -> int:
    params = {}
    for item in args.param:
        name, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--param expects NAME=VALUE, got {item!r}")
        params[name] = _parse_value(value)
    spec = DetectorSpec(args.kind, args.K, params)
    cfg = MCConfig(replications=args.reps, horizon=args.horizon, seed=args.seed, tolerance=args.tolerance)
    cache = CalibrationCache(args.cache) if args.cache else None
    res = calibrate_threshold(spec, args.arl, cfg, cache=cache)
    r = res.report
    print(json.dumps({"detector": json.loads(spec.key), "target_arl": args.arl, "threshold": res.threshold,
                      "arl": r.estimate, "std_error": r.std_error, "censored": r.censored_count,
                      "replications": r.replications, "horizon": r.horizon, "degenerate": res.degenerate},
                     indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate-config":
            validate_config(_load(args.config))
            print(f"{args.config}: ok")
            return EXIT_OK
        if args.command == "calibrate":
            return _calibrate(args)
        if args.command == "fdr":
            return _run(args, "fdr")
        return _run(args, args.experiment)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION


if __name__ == "__main__":
    sys.exit(main())
