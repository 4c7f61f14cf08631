"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 runtime failure in at
least one repetition (the failed repetitions are listed in the manifest).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .core import ConfigurationError, RngHandle, build_catalog, partition_users
from .design import solve_force_prob
from .harness import ExperimentConfig, emit_outputs, load_config, run_experiment
from .models import TRAINED_KINDS, random_nests
from .oracle import BehaviorSpec, sample_population
from .train import HyperParams, gradient_check

ENV_OUT_ROOT = "SLATEBIAS_OUT"
GRADIENT_TOLERANCE = 1e-4


def _resolve_out_dir(arg_out: str | None, config: ExperimentConfig) -> Path:
    if arg_out:
        return Path(arg_out)
    if config.out_dir:
        return Path(config.out_dir)
    root = Path(os.environ.get(ENV_OUT_ROOT, "runs"))
    return root / f"run-seed{config.seed}"


def _cmd_run(args) -> int:
    try:
        config = load_config(args.config)
    except (ConfigurationError, OSError, json.JSONDecodeError, TypeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    out_dir = _resolve_out_dir(args.out, config)
    bundle = run_experiment(config, workers=args.workers)
    try:
        written = emit_outputs(bundle, out_dir, force=args.force)
    except ConfigurationError as err:
        print(f"output error: {err}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    if not bundle.ok:
        print(f"{len(bundle.failures)} repetition(s) failed; see manifest.json",
              file=sys.stderr)
        return 3
    return 0


def _cmd_validate(args) -> int:
    try:
        config = load_config(args.config)
    except (ConfigurationError, OSError, json.JSONDecodeError, TypeError) as err:
        print(f"invalid: {err}", file=sys.stderr)
        return 2
    print(f"ok: seed={config.seed}, {config.n_repetitions} repetitions, "
          f"models={','.join(config.models)}")
    return 0


def _cmd_solve_rho(args) -> int:
    try:
        catalog = build_catalog(args.n_items, args.size_a, args.n_bias, RngHandle(0))
        rho = solve_force_prob(args.ratio, catalog, args.slate_size)
    except ConfigurationError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    print(repr(rho))
    return 0


def _cmd_check_gradients(args) -> int:
    kinds = [args.kind] if args.kind else list(TRAINED_KINDS)
    for kind in kinds:
        if kind not in TRAINED_KINDS:
            print(f"config error: no gradient for kind {kind!r}", file=sys.stderr)
            return 2
    rng = RngHandle(args.seed)
    catalog = build_catalog(12, 6, 2, rng.child(0))
    split = partition_users(6, 0.5, rng.child(1))
    pop = sample_population(6, 12, 3, rng.child(2))
    nests = random_nests(12, 3, rng.child(3))
    hyper = HyperParams(dim=3)
    from .design import EXPERIMENT_OVEREXPOSURE, SessionMix, build_pair
    pair = build_pair(pop, catalog, split, EXPERIMENT_OVEREXPOSURE, BehaviorSpec(),
                      rng.child(4), mix=SessionMix(uniform_a=2, uniform_b=2,
                                                   overexposure=2, compete_each=1),
                      rho=0.5, quartile_size=3, k=3)
    events = pair.treated.events
    worst = 0.0
    for kind in kinds:
        err = gradient_check(kind, events, hyper, nests, rng.child(5), 6, 12)
        status = "ok" if err < GRADIENT_TOLERANCE else "FAIL"
        print(f"{kind:10s} max relative error {err:.3e}  {status}")
        worst = max(worst, err)
    return 0 if worst < GRADIENT_TOLERANCE else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="slatebias",
                                     description="Exposure-bias simulation lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a full experiment from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--force", action="store_true",
                       help="overwrite a non-empty output directory")
    p_run.set_defaults(func=_cmd_run)

    p_val = sub.add_parser("validate", help="validate a config file")
    p_val.add_argument("--config", required=True)
    p_val.set_defaults(func=_cmd_validate)

    p_rho = sub.add_parser("solve-rho",
                           help="force probability for a target exposure ratio")
    p_rho.add_argument("--ratio", type=float, required=True)
    p_rho.add_argument("--n-items", type=int, default=100)
    p_rho.add_argument("--size-a", type=int, default=50)
    p_rho.add_argument("--n-bias", type=int, default=5)
    p_rho.add_argument("--slate-size", type=int, default=4)
    p_rho.set_defaults(func=_cmd_solve_rho)

    p_grad = sub.add_parser("check-gradients",
                            help="finite-difference check of the analytic gradients")
    p_grad.add_argument("--kind", default=None)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.set_defaults(func=_cmd_check_gradients)

    args = parser.parse_args(argv)
    return args.func(args)
