"""Desk-scale comparison on one domain: artifacts, runs, figures, verdict.

    python3 scripts/desk_comparison.py configs/desk_keylock.ini

Missing teacher or regressor files are trained first with the command-line
defaults. The verdict line compares median steps-to-convergence of each
curriculum against plain training.
"""

import argparse
import math
from pathlib import Path

from readc import cli, harness


def ensure_artifacts(cfg):
    needs_td = "readc-td" in cfg.algorithms
    needs_sa = "readc-sa" in cfg.algorithms
    base = ["--domain", cfg.domain]
    if needs_td and not Path(cfg.teacher_path).exists():
        Path(cfg.teacher_path).parent.mkdir(parents=True, exist_ok=True)
        argv = ["train-teacher", *base, "--board", cfg.board, "--out", cfg.teacher_path]
        if cfg.domain == "parking":
            argv += ["--threshold", str(harness.resolve_threshold(cfg, None)), "--hidden",
                     *map(str, cfg.hidden)]
        if cli.main(argv) != 0:
            raise SystemExit("teacher training failed")
    if needs_sa and not Path(cfg.regressor_path).exists():
        Path(cfg.regressor_path).parent.mkdir(parents=True, exist_ok=True)
        argv = ["train-regressor", *base, "--out", cfg.regressor_path]
        if cfg.domain == "parking":
            argv += ["--threshold", str(harness.resolve_threshold(cfg, None)), "--hidden",
                     *map(str, cfg.hidden)]
        if cli.main(argv) != 0:
            raise SystemExit("regressor training failed")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--runs", type=int)
    p.add_argument("--budget", type=int)
    args = p.parse_args()
    cfg = harness.load_config(args.config, n_runs=args.runs, budget=args.budget)
    ensure_artifacts(cfg)
    result = harness.run_experiment(cfg)
    harness.emit_plots(result.output_dir / "metrics.csv", result.output_dir, bucket=cfg.bucket)
    stats = harness.convergence_stats(result.runs)
    for algo, s in stats.items():
        print(f"{algo:>18}: converged {s['n_converged']}/{s['n_runs']}  median {s['median']:.0f}  "
              f"mean asymptotic return {s['mean_asymptotic_return']:.1f}")
    base = stats.get("none", {}).get("median", math.nan)
    for algo in ("readc-td", "readc-sa"):
        if algo in stats:
            m = stats[algo]["median"]
            ok = not math.isnan(m) and (math.isnan(base) or m <= base)
            print(f"{algo} median <= no-curriculum median: {ok}")
    print(f"threshold {result.threshold}; outputs in {result.output_dir}")


if __name__ == "__main__":
    main()
