"""Command line: ``uavisac run | aggregate | sweep``.

Every EnvConfig and TrainerConfig field has a ``--field-name`` flag and every
GaConfig field a ``--ga-field-name`` flag. Relative output paths resolve under
``$UAVISAC_OUTPUT_ROOT`` (default: the working directory).

Exit codes: 0 success, 1 training or runtime failure, 2 usage or config error,
3 output directory not empty (use ``--force``).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from .config import POLICIES, EnvConfig, GaConfig, TrainerConfig, parse_override
from .happo import TrainingHalted
from .harness import ExperimentSpec, OutputExists, SchemaMismatch, aggregate, run, spec_from_config_file, uav_count_sweep

OUTPUT_ROOT_ENV = "UAVISAC_OUTPUT_ROOT"
EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_EXISTS = 0, 1, 2, 3

SECTIONS = (("env", EnvConfig, ""), ("trainer", TrainerConfig, ""), ("ga", GaConfig, "ga-"))


def resolve_out(path: str) -> Path:
    p = Path(path)
    if p.is_absolute():
        return p
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for section, cls, prefix in SECTIONS:
        g = p.add_argument_group(f"{section} settings")
        for f in dataclasses.fields(cls):
            flag = "--" + prefix + f.name.replace("_", "-")
            g.add_argument(flag, dest=f"{section}.{f.name}", metavar="VALUE", default=None,
                           help=f"{section}.{f.name} (JSON for vectors)")


def _apply_flags(args, base: dict) -> dict:
    out = {}
    for section, cls, _ in SECTIONS:
        cfg = base.get(section) or cls()
        changes = {}
        for f in dataclasses.fields(cls):
            raw = getattr(args, f"{section}.{f.name}")
            if raw is not None:
                name, value = parse_override(f"{f.name}={raw}", cfg)
                changes[name] = value
        if section == "env" and "n_uavs" in changes and "uav_init" not in changes:
            changes["uav_init"] = None
        out[section] = dataclasses.replace(cfg, **changes)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uavisac", description="Multi-UAV ISAC simulation and C-HAPPO training")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train or play a policy for one or more seeds")
    r.add_argument("--policy", choices=POLICIES, default=None)
    r.add_argument("--seeds", type=int, nargs="+", default=None)
    r.add_argument("--scenario", default=None)
    r.add_argument("--out", required=True)
    r.add_argument("--config", type=Path, help="JSON config (as written to config.json) to start from")
    r.add_argument("--resume", type=Path, help="trainer checkpoint to resume from (single seed)")
    r.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    _add_config_flags(r)

    a = sub.add_parser("aggregate", help="mean/std across run directories")
    a.add_argument("dirs", nargs="+")
    a.add_argument("--out", required=True)

    s = sub.add_parser("sweep", help="UAV-count sweep with fusion on and off")
    s.add_argument("--policy", choices=POLICIES, default="chappo")
    s.add_argument("--seeds", type=int, nargs="+", default=[0])
    s.add_argument("--n-list", type=int, nargs="+", default=[2, 4, 6, 8])
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    _add_config_flags(s)
    return p


def _spec(args) -> ExperimentSpec:
    base = {}
    if getattr(args, "config", None):
        spec = spec_from_config_file(args.config)
        base = {"env": spec.env, "trainer": spec.trainer, "ga": spec.ga}
        defaults = {"policy": spec.policy, "seeds": spec.seeds, "scenario": spec.scenario}
    else:
        defaults = {"policy": "chappo", "seeds": [0], "scenario": "default"}
    cfgs = _apply_flags(args, base)
    return ExperimentSpec(
        scenario=getattr(args, "scenario", None) or defaults["scenario"],
        policy=args.policy or defaults["policy"],
        seeds=args.seeds or defaults["seeds"],
        out=resolve_out(args.out),
        resume=getattr(args, "resume", None),
        **cfgs,
    )


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            spec = _spec(args)
            if spec.resume is not None and len(spec.seeds) != 1:
                raise ValueError("--resume needs exactly one seed")
            out = run(spec, force=args.force)
            print(out)
        elif args.command == "aggregate":
            rows = aggregate([resolve_out(d) for d in args.dirs], resolve_out(args.out))
            print(f"{len(rows)} rows -> {resolve_out(args.out) / 'plot_data.csv'}")
        elif args.command == "sweep":
            spec = _spec(args)
            rows = uav_count_sweep(spec, args.n_list, force=args.force)
            for row in rows:
                print(f"N={row['n_uavs']} {row['mode']:8s} seed={row['seed']} rho={row['mean_rho']:.4g}")
    except OutputExists as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except (ValueError, KeyError, SchemaMismatch, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingHalted, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
