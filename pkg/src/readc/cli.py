"""Command-line entry point.

Exit codes: 0 success, 1 failed validation, 2 bad arguments or config,
3 missing teacher/regressor artifact, 4 teacher failed to converge.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .checks import run_checks
from .envs.grid import load_board, make_grid_env
from .envs.parking import ParkingEnv, ParkingSpec
from .regressor import BuildError, SourceConfig, build_training_set, fit_gbm, train_teacher

EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_BUILD = 4

SOURCE_BOARDS = {"keylock": "source_keylock_10x10", "flags": "flags_10x10", "parking": "parking8"}


def _env_for(domain, board, seed):
    if domain == "parking":
        n = 8 if board in ("parking8", "source") else 30
        return ParkingEnv(ParkingSpec(n_spots=n), np.random.default_rng(seed))
    return make_grid_env(load_board(board))


def _threshold(env, raw):
    if raw is None:
        if not hasattr(env, "optimal_return"):
            raise harness.ConfigError("parking needs an explicit --threshold")
        return env.optimal_return() - harness.AUTO_SLACK
    return harness.THRESHOLD_PRESETS.get(raw, None) or float(raw)


def cmd_run(args):
    cfg = harness.load_config(
        args.config,
        seed=args.seed,
        algorithms=tuple(args.algo) if args.algo else None,
        domain=args.domain,
        budget=args.budget,
        output_dir=args.output,
        board=args.board,
    )
    result = harness.run_experiment(cfg)
    for algo, s in harness.convergence_stats(result.runs).items():
        print(f"{algo}: converged {s['n_converged']}/{s['n_runs']} median steps {s['median']}")
    print(f"wrote {result.output_dir}")
    return 0


def cmd_train_teacher(args):
    env = _env_for(args.domain, args.board, args.seed)
    rng = np.random.default_rng(args.seed)
    agent, log = train_teacher(env, rng, _threshold(env, args.threshold), args.budget,
                               tuple(args.hidden))
    agent.snapshot().save(args.out)
    print(f"teacher converged after {log.global_step} steps; saved {args.out}")
    return 0


def cmd_train_regressor(args):
    env = _env_for(args.domain, args.board, args.seed)
    rng = np.random.default_rng(args.seed)
    cfg = SourceConfig(
        teacher_budget=args.teacher_budget,
        teacher_threshold=None if args.threshold is None else _threshold(env, args.threshold),
        snapshot_every=args.snapshot_every,
        n_snapshots=args.snapshots,
        beta=args.beta,
        hidden=tuple(args.hidden),
    )
    data = build_training_set(env, rng, cfg)
    if args.dataset:
        data.to_csv(args.dataset)
    model = fit_gbm(data.X, data.y)
    model.save(args.out)
    print(f"fit {len(model.trees)} trees on {len(data)} rows; saved {args.out}")
    return 0


def cmd_plot(args):
    paths = harness.emit_plots(args.metrics, args.out, bucket=args.bucket, best=args.best)
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_validate(args):
    results = run_checks()
    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return 0 if all(ok for _, ok in results) else EXIT_VALIDATION


def build_parser():
    p = argparse.ArgumentParser(prog="readc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from an INI config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--algo", action="append", choices=harness.ALGORITHMS)
    r.add_argument("--domain", choices=harness.DOMAINS)
    r.add_argument("--board")
    r.add_argument("--budget", type=int)
    r.add_argument("--output")
    r.set_defaults(func=cmd_run)

    for name, func, help_ in (
        ("train-teacher", cmd_train_teacher, "train and save a converged teacher"),
        ("train-regressor", cmd_train_regressor, "build source data and save a GBM"),
    ):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--domain", choices=harness.DOMAINS, default="keylock")
        t.add_argument("--board")
        t.add_argument("--out", required=True)
        t.add_argument("--seed", type=int, default=0)
        t.add_argument("--threshold")
        t.add_argument("--hidden", type=int, nargs="+", default=[64, 64, 64])
        t.set_defaults(func=func)
        if name == "train-teacher":
            t.add_argument("--budget", type=int, default=150_000)
        else:
            t.add_argument("--teacher-budget", type=int, default=150_000)
            t.add_argument("--snapshot-every", type=int, default=5_000)
            t.add_argument("--snapshots", type=int, default=6)
            t.add_argument("--beta", type=int, default=1_500)
            t.add_argument("--dataset", help="also write the training rows as CSV")

    pl = sub.add_parser("plot", help="figures from a metrics CSV")
    pl.add_argument("metrics")
    pl.add_argument("--out", default=".")
    pl.add_argument("--bucket", type=int, default=1_000)
    pl.add_argument("--best", type=float, help="keep the fastest fraction of runs, e.g. 0.8")
    pl.set_defaults(func=cmd_plot)

    v = sub.add_parser("validate", help="run the fixture invariant checks")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "board", "x") is None and args.command != "run":
        args.board = SOURCE_BOARDS[args.domain] if args.command == "train-regressor" else {
            "keylock": "keylock_10x10", "flags": "flags_10x10", "parking": "parking30"
        }[args.domain]
    try:
        return args.func(args)
    except harness.MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except BuildError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUILD
    except (harness.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
