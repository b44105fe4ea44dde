"""Held-out rank correlation of uncertainty predictors on a disjoint board.

    python3 scripts/regressor_holdout.py [--model artifacts/gbm_keylock.txt]

Builds regression rows on the held-out Key-Lock board (teacher trained
there) and reports Spearman correlation against the true teacher divergence
for the GBM, a linear fit on the same source rows, and the raw
past-vs-current relative entropy feature.
"""

import argparse
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from readc.envs import load_board, make_grid_env
from readc.regressor import (
    GbmModel,
    RegressionDataset,
    SourceConfig,
    build_training_set,
    fit_gbm,
    fit_linear,
)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--model", default="artifacts/gbm_keylock.txt")
    p.add_argument("--rows", default="artifacts/source_rows.csv")
    p.add_argument("--seed", type=int, default=40)
    args = p.parse_args()

    if Path(args.rows).exists():
        source = RegressionDataset.from_csv(args.rows)
    else:
        env = make_grid_env(load_board("source_keylock_10x10"))
        source = build_training_set(env, np.random.default_rng(0), SourceConfig())
        source.to_csv(args.rows)
    gbm = GbmModel.load(args.model) if Path(args.model).exists() else fit_gbm(source.X, source.y)
    lin = fit_linear(source.X, source.y)

    hold = make_grid_env(load_board("holdout_keylock_10x10"))
    held = build_training_set(hold, np.random.default_rng(args.seed), SourceConfig(n_snapshots=3))
    for name, pred in (
        ("gbm", gbm.predict_matrix(held.X)),
        ("linear", lin.predict_matrix(held.X)),
        ("rel_entropy", held.X[:, 0]),
    ):
        print(f"{name:>12}: Spearman {spearmanr(pred, held.y).statistic:.3f} over {len(held)} rows")


if __name__ == "__main__":
    main()
