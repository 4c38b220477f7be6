"""Command line entry point.

Exit codes: 0 all gates passed, 1 a gate failed (or a stage aborted),
2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io
from .config import ConfigError, ExperimentConfig, load_config
from .core import ParamError, derive_params
from .experiment import StageError, run_experiment

STAGE_VERBS = {
    "geometry": ["params", "geometry"],
    "ansatz": ["params", "ansatz-verify"],
    "solve": ["params", "solve"],
    "pullback": ["params", "geometry", "pullback"],
}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="forge", description="Blow-up ansatz laboratory")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--out", help="output directory (default: config 'out')")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--quiet", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("params", parents=[common], help="print derived model constants")
    p.add_argument("--N", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--k", type=int)

    sub.add_parser("geometry", parents=[common], help="localize the surface and check the map")
    sub.add_parser("ansatz", parents=[common], help="build and verify the ansatz stack")
    p = sub.add_parser("solve", parents=[common], help="solve the w-problem for each n")
    p.add_argument("--stack", help="stack directory written by 'forge ansatz'")
    p = sub.add_parser("pullback", parents=[common], help="blow-up rate and concentration")
    p.add_argument("--stack")
    sub.add_parser("run", parents=[common], help="run every experiment listed in the config")
    p = sub.add_parser("verify", parents=[common], help="re-check manifests and checksums")
    p.add_argument("path", nargs="?", help="directory to scan (default --out)")
    return ap


def _load(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    upd = {}
    if args.seed is not None:
        upd["seed"] = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        upd["workers"] = args.workers
    return cfg.model_copy(update=upd) if upd else cfg


def _say(args, msg):
    if not args.quiet:
        print(msg)


def _params(args) -> int:
    if args.config:
        m = _load(args).model
        N, p, k, R = m.N, m.p, m.k, m.R
    else:
        if args.N is None or args.p is None:
            raise ConfigError("give --config or both --N and --p")
        N, p, k, R = args.N, args.p, args.k, 2.0
    P = derive_params(N, p, k, R)
    for key, val in P.as_dict().items():
        print(f"{key:8s} {val}")
    if args.out:
        io.write_json(Path(args.out) / "params.json", P.as_dict())
    return 0


def _verify(args) -> int:
    root = Path(args.path or args.out or ".")
    dirs = io.find_manifests(root)
    if not dirs:
        print(f"no manifests under {root}", file=sys.stderr)
        return 1
    bad = 0
    for d in dirs:
        problems = io.verify_dir(d)
        bad += bool(problems)
        _say(args, f"{'ok  ' if not problems else 'FAIL'} {d}")
        for pr in problems:
            print(f"     {pr}", file=sys.stderr)
    return 1 if bad else 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        if args.verb == "params":
            return _params(args)
        if args.verb == "verify":
            return _verify(args)
        cfg = _load(args)
        stages = None if args.verb == "run" else STAGE_VERBS[args.verb]
        stack = getattr(args, "stack", None)
        status, gates = run_experiment(cfg, args.out, stages, Path(stack) if stack else None)
    except (ConfigError, ParamError) as exc:
        print(f"forge: config error: {exc}", file=sys.stderr)
        return 2
    except io.ManifestError as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return 1
    for g in gates:
        _say(args, f"{'PASS' if g.passed else 'FAIL'} {g.stage:13s} {g.name:36s} {g.value:.6g} ({g.threshold})")
    _say(args, f"{sum(g.passed for g in gates)}/{len(gates)} gates passed")
    return status


if __name__ == "__main__":
    sys.exit(main())
